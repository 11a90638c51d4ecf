from minimt.autodiff.tensor import Tensor, backward, gradients, is_grad_enabled, no_grad
from minimt.autodiff import ops
from minimt.autodiff.gradcheck import GradCheckReport, finite_difference_check

__all__ = [
    "Tensor",
    "backward",
    "gradients",
    "no_grad",
    "is_grad_enabled",
    "ops",
    "GradCheckReport",
    "finite_difference_check",
]
