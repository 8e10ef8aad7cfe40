"""Per-iteration result filtering and aggregation.

The version-consistency guarantee lives here: an iteration's accepted
results always share exactly one module signature, so no emitted value
ever mixes computations from different module versions.
"""

from __future__ import annotations

import math
from typing import Sequence

from ..errors import ValidationError
from ..executor import WindowBatch, execute
from ..modstore import ModuleStore
from ..protocol import (
    CUSTOM,
    AssignmentSpec,
    IterationOutput,
    ResultRecord,
    builtin_signature,
)

OFFBOARD_DEFAULT = "mean"


def majority_filter(
    bucket: Sequence[ResultRecord], current_signature: str | None
) -> tuple[list[ResultRecord], str | None, list[ResultRecord]]:
    """Split a bucket into the majority signature group and the rest.

    The largest signature group wins. A size tie is broken in favor of the
    group matching ``current_signature`` (the most recently deployed module
    the cloud knows about); if no tied group matches, the whole iteration
    is discarded and the accepted signature comes back as None.
    """
    if not bucket:
        raise ValidationError("bucket must not be empty", "bucket")
    groups: dict[str, list[ResultRecord]] = {}
    for record in bucket:
        groups.setdefault(record.signature, []).append(record)
    best = max(len(g) for g in groups.values())
    tied = [sig for sig, g in groups.items() if len(g) == best]
    if len(tied) == 1:
        winner = tied[0]
    elif current_signature in tied:
        winner = current_signature
    else:
        return [], None, list(bucket)
    accepted = groups[winner]
    discarded = [r for r in bucket if r.signature != winner]
    return accepted, winner, discarded


def aggregate_iteration(
    accepted: Sequence[ResultRecord],
    spec: AssignmentSpec,
    cloud_store: ModuleStore,
    discarded_count: int = 0,
) -> IterationOutput:
    """Reduce one iteration's accepted client values to a single output.

    When the assignment runs custom code and the owner deployed that module
    to the cloud, the module is reloaded from the store and applied to the
    accepted values (off-board step); otherwise the builtin reducer, the
    arithmetic mean, is used. Accepted records are ordered by client id so
    float accumulation is reproducible across runs.
    """
    if not accepted:
        raise ValidationError("accepted results must not be empty", "accepted")
    signatures = {r.signature for r in accepted}
    if len(signatures) != 1:
        raise ValidationError("accepted results mix signatures", "accepted")
    ordered = sorted(accepted, key=lambda r: r.client_id)
    values = tuple(r.value for r in ordered)
    iteration = ordered[0].iteration

    if spec.method == CUSTOM and spec.custom_module and \
            cloud_store.has(spec.user_id, spec.custom_module):
        module = cloud_store.load(spec.user_id, spec.custom_module)
        result = execute(
            module,
            WindowBatch(values=values, assignment_id=spec.assignment_id, iteration=iteration),
            spec.params,
        )
        value = result.value
        offboard = module.signature
    else:
        value = math.fsum(values) / len(values)
        offboard = builtin_signature(OFFBOARD_DEFAULT)

    return IterationOutput(
        assignment_id=spec.assignment_id,
        iteration=iteration,
        accepted_signature=ordered[0].signature,
        accepted_count=len(ordered),
        discarded_count=discarded_count,
        value=value,
        offboard_signature=offboard,
    )
