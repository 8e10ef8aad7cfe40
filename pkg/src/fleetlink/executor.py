"""Sandboxed execution of computation modules over a window of values."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Mapping

from . import expression
from .errors import EvaluationError, ValidationError
from .protocol import CodeModule, builtin_signature


@dataclass(frozen=True)
class WindowBatch:
    """One iteration's worth of telemetry values."""

    values: tuple[float, ...]
    assignment_id: str
    iteration: int


@dataclass(frozen=True)
class ExecResult:
    value: float
    signature: str
    duration: float  # elapsed ms


def execute(
    module: CodeModule,
    batch: WindowBatch,
    params: Mapping[str, float] | None = None,
    step_limit: int = expression.DEFAULT_STEP_LIMIT,
) -> ExecResult:
    """Evaluate a module's expression over the batch.

    ``xs`` is bound to the window and each parameter to ``p_<key>``.
    Deterministic and side-effect free; raises EvaluationError for runtime
    failures and ResourceLimitError past the step budget.
    """
    if not batch.values:
        raise ValidationError("window is empty", "values")
    started = time.perf_counter()
    try:
        tree = expression.parse(module.code)
    except expression.ExpressionSyntaxError as exc:
        raise EvaluationError(f"syntax error: {exc.diagnostic}") from exc
    result = expression.evaluate(tree, batch.values, dict(params or {}), step_limit)
    if isinstance(result, tuple):
        raise EvaluationError("result is not a scalar number")
    duration = (time.perf_counter() - started) * 1000.0
    return ExecResult(value=float(result), signature=module.signature, duration=duration)


def execute_builtin(keyword: str, batch: WindowBatch) -> ExecResult:
    """Run a builtin method keyword over the batch, e.g. ``mean``.

    Results carry the reserved signature ``builtin:<keyword>`` so the
    majority filter treats builtin and custom methods uniformly.
    """
    if keyword not in expression.BUILTIN_METHODS:
        raise ValidationError(f"unknown builtin method {keyword!r}", "method")
    if not batch.values:
        raise ValidationError("window is empty", "values")
    started = time.perf_counter()
    _, impl = expression.FUNCTIONS[keyword]
    value = float(impl(batch.values))
    duration = (time.perf_counter() - started) * 1000.0
    return ExecResult(
        value=value, signature=builtin_signature(keyword), duration=duration
    )


# Re-exported so callers needing validation import one executor surface.
validate_code = expression.validate_code
