"""Shared test utilities: gradient-check wiring and tiny corpora."""

from __future__ import annotations

import numpy as np

from minimt.autodiff import Tensor, finite_difference_check


def gradcheck(build, params: dict[str, Tensor], step=1e-3, tol=1e-4):
    """Assert analytic gradients of ``build(params)`` match central differences."""
    report = finite_difference_check(build, params, step=step, tol=tol)
    assert report.passed, (
        f"gradient check failed for {report.failures()}: "
        f"max rel errors {report.max_rel_error}"
    )
    return report


def random_params(rng: np.random.Generator, shapes: dict[str, tuple[int, ...]], scale=0.5):
    return {
        name: Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)
        for name, shape in shapes.items()
    }
