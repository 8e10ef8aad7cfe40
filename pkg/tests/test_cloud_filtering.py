from __future__ import annotations

import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetlink.cloud.filtering import aggregate_iteration, majority_filter
from fleetlink.errors import ValidationError
from fleetlink.modstore import ModuleStore
from fleetlink.protocol import AssignmentSpec, CodeModule, ResultRecord


def _record(client, signature, iteration=0, value=1.0):
    return ResultRecord(
        assignment_id="a-1",
        client_id=client,
        iteration=iteration,
        value=value,
        signature=signature,
        produced_at=0,
    )


SIG_A = "a" * 32
SIG_B = "b" * 32
SIG_C = "c" * 32
SIG_D = "d" * 32


def oracle_filter(bucket, current_signature):
    """Brute-force reference: group, argmax, fixed tie rule.

    Written against the stated rule only; shares no code with the
    production path.
    """
    counts = Counter(r.signature for r in bucket)
    best = max(counts.values())
    tied = sorted(sig for sig, n in counts.items() if n == best)
    if len(tied) == 1:
        winner = tied[0]
    elif current_signature in tied:
        winner = current_signature
    else:
        return [], None, list(bucket)
    return (
        [r for r in bucket if r.signature == winner],
        winner,
        [r for r in bucket if r.signature != winner],
    )


class TestMajorityFilter:
    def test_two_to_one(self):
        bucket = [_record("x", SIG_A), _record("y", SIG_A), _record("z", SIG_B)]
        accepted, signature, discarded = majority_filter(bucket, SIG_A)
        assert signature == SIG_A
        assert {r.client_id for r in accepted} == {"x", "y"}
        assert [r.client_id for r in discarded] == ["z"]

    def test_tie_broken_by_current_signature(self):
        bucket = [_record("x", SIG_A), _record("y", SIG_B)]
        accepted, signature, _ = majority_filter(bucket, SIG_B)
        assert signature == SIG_B
        assert [r.client_id for r in accepted] == ["y"]

    def test_unresolvable_tie_discards_everything(self):
        bucket = [_record("x", SIG_A), _record("y", SIG_B)]
        accepted, signature, discarded = majority_filter(bucket, SIG_C)
        assert signature is None
        assert accepted == []
        assert len(discarded) == 2

    def test_unanimity(self):
        bucket = [_record(c, SIG_A) for c in "xyz"]
        accepted, signature, discarded = majority_filter(bucket, SIG_A)
        assert len(accepted) == 3 and discarded == []

    def test_empty_bucket_rejected(self):
        with pytest.raises(ValidationError):
            majority_filter([], SIG_A)

    def test_accepted_never_mixes_signatures(self):
        rng = random.Random(7)
        sigs = [SIG_A, SIG_B, SIG_C, SIG_D]
        for _ in range(500):
            bucket = [
                _record(f"c{i}", rng.choice(sigs))
                for i in range(rng.randint(1, 20))
            ]
            accepted, signature, discarded = majority_filter(bucket, rng.choice(sigs + [None]))
            assert len(accepted) + len(discarded) == len(bucket)
            if signature is None:
                assert accepted == []
            else:
                assert {r.signature for r in accepted} == {signature}

    @settings(max_examples=400)
    @given(
        st.lists(st.sampled_from([SIG_A, SIG_B, SIG_C, SIG_D]), min_size=1, max_size=20),
        st.sampled_from([SIG_A, SIG_B, SIG_C, SIG_D, None]),
    )
    def test_matches_oracle(self, signatures, current):
        bucket = [_record(f"c{i}", sig) for i, sig in enumerate(signatures)]
        got = majority_filter(bucket, current)
        expected = oracle_filter(bucket, current)
        got_ids = ([r.client_id for r in got[0]], got[1], [r.client_id for r in got[2]])
        exp_ids = ([r.client_id for r in expected[0]], expected[1], [r.client_id for r in expected[2]])
        assert got_ids == exp_ids


def _spec(method="mean", custom_module=None, user="u1"):
    return AssignmentSpec(
        assignment_id="a-1",
        user_id=user,
        method=method,
        custom_module=custom_module,
        target_clients=(),
        iterations=5,
        window_size=4,
        params={},
    )


class TestAggregateIteration:
    @pytest.fixture
    def store(self, tmp_path):
        return ModuleStore(tmp_path / "cloud-modules")

    def test_builtin_reducer_is_mean(self, store):
        accepted = [_record("x", SIG_A, value=2.0), _record("y", SIG_A, value=4.0)]
        out = aggregate_iteration(accepted, _spec(), store)
        assert out.value == 3.0
        assert out.offboard_signature == "builtin:mean"
        assert out.accepted_count == 2 and out.discarded_count == 0

    def test_offboard_custom_module(self, store):
        module = CodeModule.create("u1", "agg", "max(xs)")
        store.store(module)
        accepted = [
            _record("x", SIG_A, value=2.0),
            _record("y", SIG_A, value=4.0),
            _record("z", SIG_A, value=7.0),
        ]
        out = aggregate_iteration(accepted, _spec("CUSTOM", "agg"), store)
        assert out.value == 7.0
        assert out.offboard_signature == module.signature

    def test_offboard_reload_sees_replacement(self, store):
        store.store(CodeModule.create("u1", "agg", "max(xs)"))
        spec = _spec("CUSTOM", "agg")
        accepted = [_record("x", SIG_A, value=2.0), _record("y", SIG_A, value=4.0)]
        first = aggregate_iteration(accepted, spec, store)
        v2 = CodeModule.create("u1", "agg", "min(xs)")
        store.store(v2)
        second = aggregate_iteration(accepted, spec, store)
        assert first.value == 4.0 and second.value == 2.0
        assert second.offboard_signature == v2.signature

    def test_custom_without_cloud_module_falls_back_to_mean(self, store):
        accepted = [_record("x", SIG_A, value=1.0), _record("y", SIG_A, value=3.0)]
        out = aggregate_iteration(accepted, _spec("CUSTOM", "agg"), store)
        assert out.value == 2.0
        assert out.offboard_signature == "builtin:mean"

    def test_mixed_signatures_rejected(self, store):
        accepted = [_record("x", SIG_A), _record("y", SIG_B)]
        with pytest.raises(ValidationError):
            aggregate_iteration(accepted, _spec(), store)

    def test_value_order_is_by_client_id(self, store):
        store.store(CodeModule.create("u1", "agg", "first(xs)"))
        accepted = [_record("y", SIG_A, value=9.0), _record("x", SIG_A, value=5.0)]
        out = aggregate_iteration(accepted, _spec("CUSTOM", "agg"), store)
        assert out.value == 5.0  # x sorts before y

    def test_iteration_carried_through(self, store):
        accepted = [_record("x", SIG_A, iteration=6, value=1.0)]
        out = aggregate_iteration(accepted, _spec(), store, discarded_count=2)
        assert out.iteration == 6
        assert out.discarded_count == 2
