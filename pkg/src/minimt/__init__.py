"""minimt: a desk-scale neural machine translation toolkit.

Three encoder-decoder architectures (attentional RNN, self-attentional
transformer, fully convolutional) trained and decoded on a self-contained
float64 reverse-mode autodiff core.
"""

from minimt.autodiff import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
