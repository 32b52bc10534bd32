"""Joint distillation and differentiable structured pruning at desk scale."""

from .tensor import Tensor, Tape, backward, check_gradients, no_grad

__all__ = ["Tensor", "Tape", "backward", "check_gradients", "no_grad"]
