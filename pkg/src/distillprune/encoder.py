"""Conv feature extractor + Transformer encoder, with prunable-group gating.

The teacher and student share one ``Encoder`` runtime; a student additionally
carries Hard Concrete gate sets for its conv channels, attention heads and FFN
intermediate units.  Blocks are pre-norm, so a fully masked sublayer
contributes exactly zero and the layer degenerates to the residual
passthrough.  Attention output and FFN second projections carry no bias for
the same reason.

Conv blocks normalize each channel over time (statistics never mix channels),
apply a per-channel gain and bias, multiply the channel gate, then gelu.
This keeps three contracts exact: masking a channel equals scaling its
gain/bias, a zero mask equals zeroed channel parameters, and physically
removing dead channels cannot disturb the surviving channels' statistics.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .hard_concrete import HardConcreteGateSet
from .tensor import Tensor

NORM_EPS = 1e-5


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int


@dataclass(frozen=True)
class EncoderConfig:
    """Uniform (unpruned) encoder hyperparameters."""

    conv_layers: tuple
    hidden_size: int
    num_layers: int
    num_heads: int
    ffn_size: int

    def __post_init__(self):
        object.__setattr__(
            self, "conv_layers", tuple(ConvSpec(*c) if not isinstance(c, ConvSpec) else c for c in self.conv_layers)
        )
        self.validate()

    def validate(self):
        if not self.conv_layers:
            raise ValueError("need at least one conv layer")
        for k, c in enumerate(self.conv_layers):
            if c.out_channels < 1 or c.kernel < 1 or c.stride < 1:
                raise ValueError(f"conv layer {k}: sizes must be positive, got {c}")
        if self.hidden_size < 1 or self.num_layers < 1 or self.ffn_size < 1:
            raise ValueError("hidden_size, num_layers, ffn_size must be positive")
        if self.num_heads < 1 or self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} must be divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self):
        return self.hidden_size // self.num_heads

    def frame_count(self, input_len):
        """Output frame count for a given raw input length."""
        t = input_len
        for c in self.conv_layers:
            pad = max(c.kernel - c.stride, 0)
            t = (t + pad - c.kernel) // c.stride + 1
            if t < 1:
                raise ValueError(f"input length {input_len} too short for the conv stack")
        return t


def toy_config():
    """Desk-scale default: large enough that 75% pruning is meaningful."""
    return EncoderConfig(
        conv_layers=((16, 5, 2), (16, 3, 2), (16, 3, 2)),
        hidden_size=32,
        num_layers=6,
        num_heads=4,
        ffn_size=64,
    )


@dataclass
class Architecture:
    """Runtime shape of a (possibly pruned) encoder: per-layer group counts."""

    conv: list  # ConvSpec per conv layer (out_channels may be pruned)
    hidden_size: int
    head_dim: int
    heads: list  # surviving heads per Transformer layer
    ffn: list  # surviving FFN units per Transformer layer

    @staticmethod
    def from_config(cfg: EncoderConfig) -> "Architecture":
        return Architecture(
            conv=list(cfg.conv_layers),
            hidden_size=cfg.hidden_size,
            head_dim=cfg.head_dim,
            heads=[cfg.num_heads] * cfg.num_layers,
            ffn=[cfg.ffn_size] * cfg.num_layers,
        )

    @property
    def num_layers(self):
        return len(self.heads)


_POSENC_CACHE = {}


def sinusoidal_table(t_len, d, dtype):
    key = (t_len, d, np.dtype(dtype).name)
    if key not in _POSENC_CACHE:
        pos = np.arange(t_len, dtype=np.float64)[:, None]
        idx = np.arange(d, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d)
        table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
        _POSENC_CACHE[key] = Tensor(table.astype(dtype))
    return _POSENC_CACHE[key]


class Encoder:
    """Forward runtime for teacher, student and extracted models."""

    def __init__(self, arch: Architecture, params: dict, frozen: bool, dtype=np.float32):
        self.arch = arch
        self.params = params
        self.frozen = frozen
        self.dtype = np.dtype(dtype)

    def parameters(self):
        return self.params

    def trainable(self):
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def _p(self, name):
        return self.params[name]

    def forward(self, x, masks=None):
        """Run the encoder, returning hidden states [X_0 .. X_N].

        ``x`` is a raw signal of shape (T_in,) or (B, T_in).  ``masks`` (only
        valid on gated students) maps group names to per-group multipliers.
        """
        if self.frozen and masks:
            raise ValueError("frozen model takes no masks")
        masks = self._check_masks(masks or {})
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        elif x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        single = x.ndim == 1
        if single:
            x = x.reshape((1, x.shape[0]))
        batch = x.shape[0]

        h = x.reshape((batch, 1, x.shape[1]))
        for k, conv in enumerate(self.arch.conv):
            h = self._conv_block(h, k, conv, masks.get(f"conv.{k}"))

        h = h.transpose((0, 2, 1))  # (B, T, C)
        t_len = h.shape[1]
        x_state = T.matmul(h, self._p("proj.weight")) + self._p("proj.bias")
        x_state = x_state + sinusoidal_table(t_len, self.arch.hidden_size, self.dtype)

        states = [x_state]
        for i in range(self.arch.num_layers):
            x_state = self._transformer_layer(x_state, i, masks)
            states.append(x_state)
        if single:
            states = [s.reshape(s.shape[1:]) for s in states]
        return states

    def _conv_block(self, h, k, conv, mask):
        pad = max(conv.kernel - conv.stride, 0)
        if pad:
            left = pad // 2
            zl = Tensor(np.zeros((h.shape[0], h.shape[1], left), dtype=self.dtype))
            zr = Tensor(np.zeros((h.shape[0], h.shape[1], pad - left), dtype=self.dtype))
            h = T.concat([zl, h, zr], axis=2)
        h = T.conv1d(h, self._p(f"conv.{k}.weight"), stride=conv.stride)
        h = T.layer_norm(h, axis=-1, eps=NORM_EPS)  # per channel, over time
        c = conv.out_channels
        h = h * self._p(f"conv.{k}.gain").reshape((c, 1)) + self._p(f"conv.{k}.bias").reshape((c, 1))
        if mask is not None:
            h = h * mask.reshape((c, 1))
        return T.gelu(h)

    def _transformer_layer(self, x_state, i, masks):
        n_heads = self.arch.heads[i]
        if n_heads > 0:
            y = T.layer_norm(x_state, axis=-1, eps=NORM_EPS)
            y = y * self._p(f"layers.{i}.attn_norm.gain") + self._p(f"layers.{i}.attn_norm.bias")
            x_state = x_state + self._attention(y, i, n_heads, masks.get(f"layers.{i}.heads"))
        n_units = self.arch.ffn[i]
        if n_units > 0:
            z = T.layer_norm(x_state, axis=-1, eps=NORM_EPS)
            z = z * self._p(f"layers.{i}.ffn_norm.gain") + self._p(f"layers.{i}.ffn_norm.bias")
            u = T.gelu(T.matmul(z, self._p(f"layers.{i}.ffn.w1")) + self._p(f"layers.{i}.ffn.b1"))
            mask = masks.get(f"layers.{i}.ffn")
            if mask is not None:
                u = u * mask
            x_state = x_state + T.matmul(u, self._p(f"layers.{i}.ffn.w2"))
        return x_state

    def _attention(self, y, i, n_heads, mask):
        batch, t_len, _ = y.shape
        dh = self.arch.head_dim

        def split(name):
            v = T.matmul(y, self._p(f"layers.{i}.attn.{name}_weight")) + self._p(f"layers.{i}.attn.{name}_bias")
            return v.reshape((batch, t_len, n_heads, dh)).transpose((0, 2, 1, 3))

        q, k, v = split("q"), split("k"), split("v")
        scores = T.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)  # (B, H, T, dh)
        if mask is not None:
            ctx = ctx * mask.reshape((1, n_heads, 1, 1))
        ctx = ctx.transpose((0, 2, 1, 3)).reshape((batch, t_len, n_heads * dh))
        return T.matmul(ctx, self._p(f"layers.{i}.attn.out_weight"))

    def _check_masks(self, masks):
        checked = {}
        for name, value in masks.items():
            expected = self._group_count(name)
            if expected is None:
                raise ValueError(f"unknown mask group {name!r}")
            if not isinstance(value, Tensor):
                value = Tensor(np.asarray(value, dtype=self.dtype))
            if value.size != expected:
                raise T.ShapeError(
                    f"mask {name!r}: {value.size} values for {expected} groups"
                )
            checked[name] = value
        return checked

    def _group_count(self, name):
        parts = name.split(".")
        if parts[0] == "conv" and len(parts) == 2:
            k = int(parts[1])
            if 0 <= k < len(self.arch.conv):
                return self.arch.conv[k].out_channels
        if parts[0] == "layers" and len(parts) == 3:
            i = int(parts[1])
            if 0 <= i < self.arch.num_layers:
                if parts[2] == "heads":
                    return self.arch.heads[i]
                if parts[2] == "ffn":
                    return self.arch.ffn[i]
        return None


def _init_params(arch: Architecture, rng, dtype, trainable):
    def normal(shape, scale):
        return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype), requires_grad=trainable)

    def const(shape, value):
        return Tensor(np.full(shape, value, dtype=dtype), requires_grad=trainable)

    p = {}
    in_ch = 1
    for k, c in enumerate(arch.conv):
        p[f"conv.{k}.weight"] = normal((c.out_channels, in_ch, c.kernel), 1.0 / math.sqrt(in_ch * c.kernel))
        p[f"conv.{k}.gain"] = const((c.out_channels,), 1.0)
        p[f"conv.{k}.bias"] = const((c.out_channels,), 0.0)
        in_ch = c.out_channels
    d = arch.hidden_size
    p["proj.weight"] = normal((in_ch, d), 1.0 / math.sqrt(in_ch))
    p["proj.bias"] = const((d,), 0.0)
    for i in range(arch.num_layers):
        width = arch.heads[i] * arch.head_dim
        for name in ("q", "k", "v"):
            p[f"layers.{i}.attn.{name}_weight"] = normal((d, width), 1.0 / math.sqrt(d))
            p[f"layers.{i}.attn.{name}_bias"] = const((width,), 0.0)
        p[f"layers.{i}.attn.out_weight"] = normal((width, d), 1.0 / math.sqrt(width))
        p[f"layers.{i}.attn_norm.gain"] = const((d,), 1.0)
        p[f"layers.{i}.attn_norm.bias"] = const((d,), 0.0)
        f = arch.ffn[i]
        p[f"layers.{i}.ffn.w1"] = normal((d, f), 1.0 / math.sqrt(d))
        p[f"layers.{i}.ffn.b1"] = const((f,), 0.0)
        p[f"layers.{i}.ffn.w2"] = normal((f, d), 1.0 / math.sqrt(f))
        p[f"layers.{i}.ffn_norm.gain"] = const((d,), 1.0)
        p[f"layers.{i}.ffn_norm.bias"] = const((d,), 0.0)
    return p


def init_teacher(config: EncoderConfig, seed, dtype=np.float32) -> Encoder:
    """Seeded random frozen encoder standing in for a pretrained checkpoint."""
    arch = Architecture.from_config(config)
    rng = np.random.default_rng([int(seed), 0])
    params = _init_params(arch, rng, dtype, trainable=False)
    return Encoder(arch, params, frozen=True, dtype=dtype)


@dataclass
class StudentModel:
    """Gated trainable copy of a teacher encoder."""

    encoder: Encoder
    gates: dict = field(default_factory=dict)  # group name -> HardConcreteGateSet
    prune_conv: bool = True

    def forward(self, x, masks=None):
        return self.encoder.forward(x, masks=masks)

    def parameters(self):
        return self.encoder.parameters()

    def sample_masks(self, rng):
        return {name: gs.sample_mask(rng) for name, gs in self.gates.items()}

    def deterministic_masks(self):
        return {name: gs.deterministic_mask() for name, gs in self.gates.items()}

    def log_alphas(self):
        return {name: gs.log_alpha for name, gs in self.gates.items()}


def init_student_from_teacher(teacher: Encoder, prune_conv=True, gate_kwargs=None) -> StudentModel:
    """Copy the teacher's parameters into a trainable student with open gates."""
    gate_kwargs = dict(gate_kwargs or {})
    arch = Architecture(
        conv=list(teacher.arch.conv),
        hidden_size=teacher.arch.hidden_size,
        head_dim=teacher.arch.head_dim,
        heads=list(teacher.arch.heads),
        ffn=list(teacher.arch.ffn),
    )
    params = {
        name: Tensor(t.data.copy(), requires_grad=True) for name, t in teacher.params.items()
    }
    encoder = Encoder(arch, params, frozen=False, dtype=teacher.dtype)
    gates = {}
    dtype = teacher.dtype
    if prune_conv:
        for k, c in enumerate(arch.conv):
            gates[f"conv.{k}"] = HardConcreteGateSet(c.out_channels, dtype=dtype, **gate_kwargs)
    for i in range(arch.num_layers):
        gates[f"layers.{i}.heads"] = HardConcreteGateSet(arch.heads[i], dtype=dtype, **gate_kwargs)
        gates[f"layers.{i}.ffn"] = HardConcreteGateSet(arch.ffn[i], dtype=dtype, **gate_kwargs)
    return StudentModel(encoder=encoder, gates=gates, prune_conv=prune_conv)


def param_checksum(model: Encoder) -> str:
    """Stable digest of every parameter; detects any training-time mutation."""
    digest = hashlib.sha256()
    for name in sorted(model.params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return digest.hexdigest()


def param_total(model: Encoder) -> int:
    """Physical element count over every parameter tensor."""
    return int(np.sum([t.size for t in model.params.values()], dtype=np.int64)) if model.params else 0
