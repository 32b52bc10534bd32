"""Feature-matching distillation losses with learned per-layer projections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

COS_EPS = 1e-8


@dataclass
class DistillSpec:
    """Matched layer set, one trainable projection per matched layer, weights.

    Projections are training-time scaffolding: they are excluded from
    sparsity accounting and dropped at extraction.
    """

    match_layers: list
    projections: list = field(default_factory=list)
    l1_weight: float = 1.0
    cos_weight: float = 1.0

    def validate(self, num_layers):
        s = list(self.match_layers)
        if s != sorted(set(s)):
            raise ValueError(f"match layers must be ascending and unique, got {s}")
        if s and (s[0] < 0 or s[-1] > num_layers):
            raise ValueError(f"match layers must lie in [0, {num_layers}], got {s}")
        if len(self.projections) != len(s):
            raise ValueError(f"{len(s)} matched layers but {len(self.projections)} projections")


def default_match_layers(num_layers):
    """Conv output plus every third of the stack: {0, N/3, 2N/3, N}."""
    return sorted({0} | {round(k * num_layers / 3) for k in (1, 2, 3)})


def make_distill_spec(num_layers, hidden_size, match_layers=None, l1_weight=1.0, cos_weight=1.0, dtype=np.float32):
    """Identity-initialized projections: a copied student starts at zero loss."""
    layers = default_match_layers(num_layers) if match_layers is None else list(match_layers)
    projections = [
        Tensor(np.eye(hidden_size, dtype=dtype), requires_grad=True) for _ in layers
    ]
    spec = DistillSpec(layers, projections, float(l1_weight), float(cos_weight))
    spec.validate(num_layers)
    return spec


def feature_distance(a, b, l1_weight=1.0, cos_weight=1.0, eps=COS_EPS):
    """Frame-averaged L1 (normalized by width) plus cosine distance.

    Accepts (T, d) or any leading batch dims; the mean runs over every frame.
    """
    if a.shape != b.shape:
        raise ShapeError(f"feature_distance: shapes {a.shape} and {b.shape} differ")
    d = a.shape[-1]
    l1 = T.sum(T.abs(a - b), axis=-1) * (1.0 / d)
    dot = T.sum(a * b, axis=-1)
    norm_a = T.sqrt(T.sum(a * a, axis=-1))
    norm_b = T.sqrt(T.sum(b * b, axis=-1))
    cos = dot / (norm_a * norm_b + eps)
    per_frame = l1 * l1_weight + (1.0 - cos) * cos_weight
    return T.mean(per_frame)


def _project(states, index, spec, num_layers):
    if index >= len(states):
        raise ValueError(f"matched layer {index} missing from states of length {len(states)}")
    return states[index]


def layer_to_layer_loss(teacher_states, student_states, spec: DistillSpec):
    """Sum over matched layers of distance(teacher_i, student_i @ W_i)."""
    spec.validate(len(student_states) - 1)
    total = None
    for index, w in zip(spec.match_layers, spec.projections):
        tea = _project(teacher_states, index, spec, len(teacher_states) - 1)
        stu = _project(student_states, index, spec, len(student_states) - 1)
        dist = feature_distance(tea, T.matmul(stu, w), spec.l1_weight, spec.cos_weight)
        total = dist if total is None else total + dist
    if total is None:
        raise ValueError("no layers to match")
    return total


def prediction_layer_loss(teacher_states, student_states, spec: DistillSpec):
    """Predict each matched teacher layer (conv output excluded) from the
    final student layer through that layer's own projection."""
    spec.validate(len(student_states) - 1)
    final = student_states[-1]
    total = None
    for index, w in zip(spec.match_layers, spec.projections):
        if index == 0:
            continue
        tea = _project(teacher_states, index, spec, len(teacher_states) - 1)
        dist = feature_distance(tea, T.matmul(final, w), spec.l1_weight, spec.cos_weight)
        total = dist if total is None else total + dist
    if total is None:
        raise ValueError("no layers to match after dropping the conv output")
    return total


DISTILL_MODES = {
    "layer_to_layer": layer_to_layer_loss,
    "prediction_layer": prediction_layer_loss,
}
