"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from minimt.autodiff.tensor import Tensor, gradients, no_grad
from minimt.errors import EvaluationError


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between backward() and central differences."""

    step: float
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.max_rel_error.values())

    def failures(self) -> list[str]:
        return [n for n, err in self.max_rel_error.items() if err > self.tolerance]


def finite_difference_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-3,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare backward() gradients of ``f(params)`` against (f(x+h)-f(x-h))/2h.

    ``f`` must rebuild its graph on every call and be deterministic (run any
    dropout in infer mode). Relative error uses max(|analytic|, |numeric|, 1e-8)
    as the denominator.
    """

    def evaluate() -> float:
        with no_grad():
            value = float(f(params).item())
        if not np.isfinite(value):
            raise EvaluationError("function under check produced a non-finite value")
        return value

    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise EvaluationError("function under check produced a non-finite value")
    analytic = gradients(loss, params)

    report = GradCheckReport(step=step, tolerance=tol)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            f_plus = evaluate()
            flat[i] = original - step
            f_minus = evaluate()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = grad_flat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        report.max_rel_error[name] = worst
    return report
