"""Physical subnetwork extraction: excise dead groups, fold fractional gates.

Groups whose deterministic mask is exactly zero are removed: tensor slices are
dropped and downstream input dimensions shrink.  Surviving fractional gates
are folded multiplicatively into each group's outgoing parameters (conv:
norm gain and bias; head: the consuming out-projection rows; FFN unit: the
second-layer row), so the extracted model reproduces the masked forward pass
without any gate machinery.  A layer losing all heads keeps only its FFN path
and vice versa; a conv layer losing every channel breaks the signal path and
is a hard error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import Architecture, ConvSpec, Encoder, StudentModel, param_total
from .sparsity import ffn_unit_param_size, head_param_size
from .tensor import Tensor


class ExtractionError(RuntimeError):
    pass


@dataclass
class PrunedArchitecture:
    """Surviving vs original group counts plus parameter totals."""

    conv_channels: list  # (surviving, original) per conv layer
    heads: list  # (surviving, original) per Transformer layer
    ffn_units: list  # (surviving, original) per Transformer layer
    gated_params: int
    gated_params_original: int
    total_params: int
    total_params_original: int


def gated_param_count(arch: Architecture, prune_conv=True) -> int:
    """Parameter count of an architecture under the prunable-group accounting."""
    total = 0
    if prune_conv:
        in_ch = 1
        for c in arch.conv:
            total += c.kernel * in_ch * c.out_channels + c.out_channels
            in_ch = c.out_channels
    h_size = head_param_size(arch.hidden_size, arch.head_dim)
    u_size = ffn_unit_param_size(arch.hidden_size)
    total += sum(h_size * h for h in arch.heads)
    total += sum(u_size * f for f in arch.ffn)
    return total


def extract(student: StudentModel, masks=None):
    """Build the physically smaller model; returns (pruned, PrunedArchitecture)."""
    if masks is None:
        masks = student.deterministic_masks()
    src = student.encoder
    dtype = src.dtype
    params = {}

    def put(name, value):
        params[name] = Tensor(np.ascontiguousarray(value).astype(dtype), requires_grad=False)

    conv_record, new_conv = [], []
    prev_idx = None  # None means the fixed single input channel
    for k, conv in enumerate(src.arch.conv):
        mask = masks.get(f"conv.{k}")
        if mask is None:
            idx = np.arange(conv.out_channels)
            fold = np.ones(conv.out_channels, dtype=np.float64)
        else:
            idx = np.flatnonzero(np.asarray(mask) > 0)
            fold = np.asarray(mask, dtype=np.float64)[idx]
        if idx.size == 0:
            raise ExtractionError(f"conv layer {k} lost every channel; the signal path is broken")
        w = src.params[f"conv.{k}.weight"].data[idx]
        if prev_idx is not None:
            w = w[:, prev_idx, :]
        put(f"conv.{k}.weight", w)
        put(f"conv.{k}.gain", src.params[f"conv.{k}.gain"].data[idx] * fold)
        put(f"conv.{k}.bias", src.params[f"conv.{k}.bias"].data[idx] * fold)
        conv_record.append((int(idx.size), conv.out_channels))
        new_conv.append(ConvSpec(int(idx.size), conv.kernel, conv.stride))
        prev_idx = idx

    proj = src.params["proj.weight"].data
    put("proj.weight", proj[prev_idx, :] if prev_idx is not None else proj)
    put("proj.bias", src.params["proj.bias"].data)

    dh = src.arch.head_dim
    head_record, ffn_record, new_heads, new_ffn = [], [], [], []
    for i in range(src.arch.num_layers):
        orig_heads = src.arch.heads[i]
        mask = masks.get(f"layers.{i}.heads")
        if orig_heads == 0:
            survivors = np.array([], dtype=int)
        elif mask is None:
            survivors = np.arange(orig_heads)
        else:
            survivors = np.flatnonzero(np.asarray(mask) > 0)
        if survivors.size:
            cols = np.concatenate([np.arange(h * dh, (h + 1) * dh) for h in survivors])
            fold = np.repeat(np.asarray(masks.get(f"layers.{i}.heads", np.ones(orig_heads)))[survivors], dh)
            for name in ("q", "k", "v"):
                put(f"layers.{i}.attn.{name}_weight", src.params[f"layers.{i}.attn.{name}_weight"].data[:, cols])
                put(f"layers.{i}.attn.{name}_bias", src.params[f"layers.{i}.attn.{name}_bias"].data[cols])
            out_w = src.params[f"layers.{i}.attn.out_weight"].data[cols, :] * fold[:, None]
            put(f"layers.{i}.attn.out_weight", out_w)
            put(f"layers.{i}.attn_norm.gain", src.params[f"layers.{i}.attn_norm.gain"].data)
            put(f"layers.{i}.attn_norm.bias", src.params[f"layers.{i}.attn_norm.bias"].data)
        head_record.append((int(survivors.size), orig_heads))
        new_heads.append(int(survivors.size))

        orig_units = src.arch.ffn[i]
        mask = masks.get(f"layers.{i}.ffn")
        if orig_units == 0:
            survivors = np.array([], dtype=int)
        elif mask is None:
            survivors = np.arange(orig_units)
        else:
            survivors = np.flatnonzero(np.asarray(mask) > 0)
        if survivors.size:
            fold = np.asarray(masks.get(f"layers.{i}.ffn", np.ones(orig_units)))[survivors]
            put(f"layers.{i}.ffn.w1", src.params[f"layers.{i}.ffn.w1"].data[:, survivors])
            put(f"layers.{i}.ffn.b1", src.params[f"layers.{i}.ffn.b1"].data[survivors])
            put(f"layers.{i}.ffn.w2", src.params[f"layers.{i}.ffn.w2"].data[survivors, :] * fold[:, None])
            put(f"layers.{i}.ffn_norm.gain", src.params[f"layers.{i}.ffn_norm.gain"].data)
            put(f"layers.{i}.ffn_norm.bias", src.params[f"layers.{i}.ffn_norm.bias"].data)
        ffn_record.append((int(survivors.size), orig_units))
        new_ffn.append(int(survivors.size))

    arch = Architecture(
        conv=new_conv,
        hidden_size=src.arch.hidden_size,
        head_dim=dh,
        heads=new_heads,
        ffn=new_ffn,
    )
    pruned = Encoder(arch, params, frozen=True, dtype=dtype)
    record = PrunedArchitecture(
        conv_channels=conv_record,
        heads=head_record,
        ffn_units=ffn_record,
        gated_params=gated_param_count(arch, student.prune_conv),
        gated_params_original=gated_param_count(src.arch, student.prune_conv),
        total_params=param_total(pruned),
        total_params_original=param_total(src),
    )
    return pruned, record


@dataclass
class EquivalenceReport:
    max_abs: float
    max_rel: float
    num_inputs: int
    tol: float

    @property
    def passed(self):
        return self.max_abs < self.tol


def verify_equivalence(student: StudentModel, pruned: Encoder, masks=None, num_inputs=100, tol=1e-5, seed=0, input_len=64):
    """Compare masked-forward and extracted-forward final states on seeded inputs."""
    if masks is None:
        masks = student.deterministic_masks()
    max_abs = 0.0
    max_rel = 0.0
    for i in range(num_inputs):
        x = np.random.default_rng([int(seed), 3, i]).standard_normal(input_len).astype(np.float32)
        ref = student.forward(x, masks=masks)[-1].data
        got = pruned.forward(x)[-1].data
        diff = np.abs(ref - got)
        max_abs = max(max_abs, float(diff.max()))
        denom = np.maximum(np.maximum(np.abs(ref), np.abs(got)), 1e-6)
        max_rel = max(max_rel, float((diff / denom).max()))
    return EquivalenceReport(max_abs=max_abs, max_rel=max_rel, num_inputs=num_inputs, tol=tol)


def report_architecture(record: PrunedArchitecture, fmt="text") -> str:
    """Render surviving counts as an aligned table or machine-readable CSV."""
    rows = []
    for k, (surv, orig) in enumerate(record.conv_channels):
        rows.append(("conv", k, surv, orig))
    for i, (surv, orig) in enumerate(record.heads):
        rows.append(("heads", i, surv, orig))
    for i, (surv, orig) in enumerate(record.ffn_units):
        rows.append(("ffn", i, surv, orig))
    rows.append(("params_gated", -1, record.gated_params, record.gated_params_original))
    rows.append(("params_total", -1, record.total_params, record.total_params_original))

    if fmt == "csv":
        lines = ["kind,index,surviving,original"]
        lines += [f"{kind},{idx},{surv},{orig}" for kind, idx, surv, orig in rows]
        return "\n".join(lines) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    lines = [f"{'kind':<14} {'index':>5} {'surviving':>9} {'original':>8}"]
    for kind, idx, surv, orig in rows:
        idx_s = "" if idx < 0 else str(idx)
        lines.append(f"{kind:<14} {idx_s:>5} {surv:>9} {orig:>8}")
    return "\n".join(lines) + "\n"


def parse_architecture_csv(text) -> PrunedArchitecture:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if lines[0] != "kind,index,surviving,original":
        raise ValueError("unrecognized architecture CSV header")
    conv, heads, ffn = [], [], []
    totals = {}
    for ln in lines[1:]:
        kind, idx, surv, orig = ln.split(",")
        idx, surv, orig = int(idx), int(surv), int(orig)
        if kind == "conv":
            conv.append((surv, orig))
        elif kind == "heads":
            heads.append((surv, orig))
        elif kind == "ffn":
            ffn.append((surv, orig))
        elif kind in ("params_gated", "params_total"):
            totals[kind] = (surv, orig)
        else:
            raise ValueError(f"unknown row kind {kind!r}")
    return PrunedArchitecture(
        conv_channels=conv,
        heads=heads,
        ffn_units=ffn,
        gated_params=totals["params_gated"][0],
        gated_params_original=totals["params_gated"][1],
        total_params=totals["params_total"][0],
        total_params_original=totals["params_total"][1],
    )
