"""Output-guided saliency detection: autodiff core, network, training and evaluation."""

from .tensor import Tensor, backward, grad_check, no_grad

__all__ = ["Tensor", "backward", "grad_check", "no_grad"]
__version__ = "0.1.0"
