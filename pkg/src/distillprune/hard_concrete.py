"""Hard Concrete gates: stochastic masks, closed-form expected L0, inference masks.

Each gate set holds one trainable log-alpha per prunable group.  A mask sample
stretches a logistic-noise sigmoid to (lo, hi) and clamps it to [0, 1], which
places point masses at exactly 0 and 1 while staying differentiable in
log-alpha wherever the mask is strictly interior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_BETA = 2.0 / 3.0
DEFAULT_STRETCH_LO = -0.1
DEFAULT_STRETCH_HI = 1.1

# log-alpha at init opens every gate (deterministic mask exactly 1), so a
# student copied from its teacher starts functionally identical to it
INIT_LOG_ALPHA = 4.0

_UNIFORM_CLIP = 1e-6


@dataclass
class MaskSample:
    """One stochastic draw: uniforms u, concrete v, stretched v_bar, clamped z."""

    u: np.ndarray
    v: Tensor
    v_bar: Tensor
    z: Tensor


class HardConcreteGateSet:
    """Per-group gate parameters plus the shared distribution constants."""

    def __init__(
        self,
        group_count,
        beta=DEFAULT_BETA,
        stretch_lo=DEFAULT_STRETCH_LO,
        stretch_hi=DEFAULT_STRETCH_HI,
        init_log_alpha=INIT_LOG_ALPHA,
        dtype=np.float32,
    ):
        if group_count < 0:
            raise ValueError(f"group_count must be >= 0, got {group_count}")
        if not beta > 0:
            raise ValueError(f"beta must be > 0, got {beta}")
        if not (stretch_lo < 0 < 1 < stretch_hi):
            raise ValueError(f"need stretch_lo < 0 < 1 < stretch_hi, got ({stretch_lo}, {stretch_hi})")
        self.group_count = int(group_count)
        self.beta = float(beta)
        self.stretch_lo = float(stretch_lo)
        self.stretch_hi = float(stretch_hi)
        self.log_alpha = Tensor(
            np.full(self.group_count, init_log_alpha, dtype=dtype), requires_grad=True
        )

    @property
    def dtype(self):
        return self.log_alpha.dtype

    def sample_mask(self, rng) -> MaskSample:
        """Draw one mask from the gate distribution using the caller's RNG stream."""
        u = rng.uniform(size=self.group_count)
        return self.mask_from_uniform(u)

    def mask_from_uniform(self, u) -> MaskSample:
        """Build the mask graph from fixed uniforms (frozen noise for grad checks)."""
        u = np.clip(np.asarray(u, dtype=self.dtype), _UNIFORM_CLIP, 1.0 - _UNIFORM_CLIP)
        logits = Tensor(np.log(u / (1.0 - u)).astype(self.dtype))
        v = T.sigmoid((logits + self.log_alpha) * (1.0 / self.beta))
        v_bar = v * (self.stretch_hi - self.stretch_lo) + self.stretch_lo
        z = T.clamp(v_bar, 0.0, 1.0)
        return MaskSample(u=u, v=v, v_bar=v_bar, z=z)

    def prob_nonzero(self) -> Tensor:
        """P(z_j > 0) per group, in closed form; differentiable in log-alpha."""
        shift = self.beta * np.log(-self.stretch_lo / self.stretch_hi)
        return T.sigmoid(self.log_alpha - float(shift))

    def expected_l0(self) -> Tensor:
        """Expected number of nonzero gates (unweighted group count)."""
        if self.group_count == 0:
            return Tensor(np.zeros((), dtype=self.dtype))
        return T.sum(self.prob_nonzero())

    def deterministic_mask(self) -> np.ndarray:
        """Inference-time mask: the noise-free stretched sigmoid, clamped.

        A group is pruned iff the returned value is exactly 0.
        """
        v = 1.0 / (1.0 + np.exp(-self.log_alpha.data.astype(np.float64)))
        stretched = (self.stretch_hi - self.stretch_lo) * v + self.stretch_lo
        return np.clip(stretched, 0.0, 1.0).astype(self.dtype)
