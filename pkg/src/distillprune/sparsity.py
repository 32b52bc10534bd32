"""Differentiable parameter accounting and the constrained-sparsity controller.

The layout assigns each prunable group a parameter weight:

* conv channel: couples multiplicatively with its input channels, so a conv
  layer contributes ``kernel * alive_in * alive_out + alive_out`` (kernel
  slices plus the per-channel bias); layer 0 has a fixed single input channel.
* attention head: its Q/K/V/O weight slices plus its Q/K/V bias elements,
  ``head_dim * (4 * hidden + 3)``.
* FFN unit: its two weight vectors plus two bias shares, ``2 * hidden + 2``.

Norm affines, the positional table, the post-conv projection and distillation
projections are training scaffolding or shared plumbing and stay outside both
numerator and denominator.  Expected counts use independence across gates,
which is exact because gates are sampled independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig
from .tensor import Tensor


@dataclass(frozen=True)
class ConvEntry:
    gate: str
    kernel: int
    groups: int
    in_gate: str | None  # gate of the producing layer, None for the first
    in_fixed: int  # fixed input channel count when in_gate is None


@dataclass(frozen=True)
class HeadEntry:
    gate: str
    groups: int
    head_size: int


@dataclass(frozen=True)
class FfnEntry:
    gate: str
    groups: int
    unit_size: int


@dataclass(frozen=True)
class ParamGroupLayout:
    conv_entries: tuple
    head_entries: tuple
    ffn_entries: tuple
    total_prunable: int

    def gate_names(self):
        return [e.gate for e in self.conv_entries + self.head_entries + self.ffn_entries]


def head_param_size(hidden_size, head_dim):
    return head_dim * (4 * hidden_size + 3)


def ffn_unit_param_size(hidden_size):
    return 2 * hidden_size + 2


def layout_for(config: EncoderConfig, prune_conv=True) -> ParamGroupLayout:
    conv_entries = []
    if prune_conv:
        for k, c in enumerate(config.conv_layers):
            conv_entries.append(
                ConvEntry(
                    gate=f"conv.{k}",
                    kernel=c.kernel,
                    groups=c.out_channels,
                    in_gate=f"conv.{k - 1}" if k > 0 else None,
                    in_fixed=1 if k == 0 else config.conv_layers[k - 1].out_channels,
                )
            )
    h_size = head_param_size(config.hidden_size, config.head_dim)
    u_size = ffn_unit_param_size(config.hidden_size)
    head_entries = [HeadEntry(f"layers.{i}.heads", config.num_heads, h_size) for i in range(config.num_layers)]
    ffn_entries = [FfnEntry(f"layers.{i}.ffn", config.ffn_size, u_size) for i in range(config.num_layers)]

    total = 0
    in_ch = 1
    for e in conv_entries:
        total += e.kernel * in_ch * e.groups + e.groups
        in_ch = e.groups
    total += sum(e.head_size * e.groups for e in head_entries)
    total += sum(e.unit_size * e.groups for e in ffn_entries)
    return ParamGroupLayout(tuple(conv_entries), tuple(head_entries), tuple(ffn_entries), total)


def _validate(gate_sets, layout):
    groups = {e.gate: e.groups for e in layout.conv_entries + layout.head_entries + layout.ffn_entries}
    for name, count in groups.items():
        gs = gate_sets.get(name)
        if gs is None:
            raise ValueError(f"layout group {name!r} has no gate set")
        if gs.group_count != count:
            raise ValueError(f"gate set {name!r} has {gs.group_count} groups, layout expects {count}")


def expected_remaining_params(gate_sets, layout) -> Tensor:
    """Expected surviving parameter count, differentiable in every log-alpha."""
    _validate(gate_sets, layout)
    terms = []
    for e in layout.conv_entries:
        alive_out = T.sum(gate_sets[e.gate].prob_nonzero())
        if e.in_gate is None:
            terms.append(alive_out * float(e.kernel * e.in_fixed) + alive_out)
        else:
            alive_in = T.sum(gate_sets[e.in_gate].prob_nonzero())
            terms.append(alive_in * alive_out * float(e.kernel) + alive_out)
    for e in layout.head_entries:
        terms.append(T.sum(gate_sets[e.gate].prob_nonzero()) * float(e.head_size))
    for e in layout.ffn_entries:
        terms.append(T.sum(gate_sets[e.gate].prob_nonzero()) * float(e.unit_size))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def current_sparsity(gate_sets, layout) -> Tensor:
    """Expected fraction of prunable parameters removed; in [0, 1]."""
    remaining = expected_remaining_params(gate_sets, layout)
    return 1.0 - remaining * (1.0 / layout.total_prunable)


def discrete_param_count(binary_masks, layout) -> int:
    """Exact surviving-parameter count for hard 0/1 masks."""
    sums = {}
    for e in layout.conv_entries + layout.head_entries + layout.ffn_entries:
        m = np.asarray(binary_masks[e.gate])
        if m.size != e.groups:
            raise ValueError(f"mask {e.gate!r} has {m.size} entries, layout expects {e.groups}")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"mask {e.gate!r} is not binary")
        sums[e.gate] = int(m.sum())
    total = 0
    for e in layout.conv_entries:
        alive_in = e.in_fixed if e.in_gate is None else sums[e.in_gate]
        total += e.kernel * alive_in * sums[e.gate] + sums[e.gate]
    for e in layout.head_entries:
        total += e.head_size * sums[e.gate]
    for e in layout.ffn_entries:
        total += e.unit_size * sums[e.gate]
    return total


def lagrangian_penalty(s, t, lambda1, lambda2):
    """lambda1 * (s - t) + lambda2 * (s - t)^2; ascent on the multipliers."""
    gap = s - t
    return lambda1 * gap + lambda2 * (gap * gap)


def target_at(step, ramp_steps, t_final):
    """Linear ramp from 0 to t_final over ramp_steps, then flat."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if ramp_steps <= 0 or step >= ramp_steps:
        return float(t_final)
    return step / ramp_steps * float(t_final)


class SparsityController:
    """Lagrange multipliers plus the target schedule for Step-1 training."""

    def __init__(self, layout: ParamGroupLayout, t_final, ramp_steps, dtype=np.float32):
        if not 0.0 <= t_final < 1.0:
            raise ValueError(f"t_final must be in [0, 1), got {t_final}")
        self.layout = layout
        self.t_final = float(t_final)
        self.ramp_steps = int(ramp_steps)
        self.lambda1 = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
        self.lambda2 = Tensor(np.zeros((), dtype=dtype), requires_grad=True)

    def target_at(self, step):
        return target_at(step, self.ramp_steps, self.t_final)

    def penalty(self, s, step):
        return lagrangian_penalty(s, self.target_at(step), self.lambda1, self.lambda2)

    def multipliers(self):
        return [self.lambda1, self.lambda2]
