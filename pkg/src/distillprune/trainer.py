"""Two-step compression training.

Step 1 solves the minimax problem: descend the distillation loss plus the
augmented-Lagrangian sparsity penalty over model parameters, projections and
gate log-alphas, while ascending the two multipliers.  Step 2 freezes the
gates at their deterministic values and keeps distilling the fixed
architecture.  Main parameters (weights and distillation projections) and
auxiliary parameters (log-alphas and multipliers) use separate optimizers
with their own peak learning rates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import synth_batch
from .distillation import DISTILL_MODES, DistillSpec, make_distill_spec
from .encoder import Encoder, StudentModel, init_student_from_teacher
from .sparsity import SparsityController, current_sparsity, layout_for
from .tensor import Tape, Tensor


class NumericAbort(ArithmeticError):
    """Training produced a non-finite loss; message carries gate statistics."""


@dataclass
class Step1Recipe:
    total_steps: int = 3000
    warmup_steps: int = 900
    main_lr: float = 2e-4
    aux_lr: float = 2e-2
    ramp_steps: int = 300
    t_final: float = 0.5


@dataclass
class Step2Recipe:
    total_steps: int = 1500
    warmup_steps: int = 300
    main_lr: float = 1e-4


@dataclass
class TrainRecipe:
    step1: Step1Recipe = field(default_factory=Step1Recipe)
    step2: Step2Recipe = field(default_factory=Step2Recipe)
    batch_size: int = 4
    seq_len: int = 64
    seed: int = 0
    distill_mode: str = "layer_to_layer"
    prune_conv: bool = True

    def validate(self):
        for phase in (self.step1, self.step2):
            if phase.warmup_steps > phase.total_steps:
                raise ValueError("warmup_steps must be <= total_steps")
            if phase.total_steps < 1 or phase.warmup_steps < 0:
                raise ValueError("step counts must be positive")
            if phase.main_lr <= 0:
                raise ValueError("learning rates must be > 0")
        if self.step1.aux_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.step1.ramp_steps < 0 or not 0.0 <= self.step1.t_final < 1.0:
            raise ValueError("need ramp_steps >= 0 and t_final in [0, 1)")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("batch_size and seq_len must be positive")
        if self.distill_mode not in DISTILL_MODES:
            raise ValueError(f"unknown distill mode {self.distill_mode!r}")


def lr_at(step, warmup, total, peak):
    """Linear warmup 0 -> peak over [0, warmup], linear decay to 0 at total."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step <= warmup:
        return peak if warmup == 0 else peak * step / warmup
    return peak * (total - step) / (total - warmup)


class Adam:
    """Adaptive moment estimation; one shared step counter per instance."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data -= (lr * scale * m / (np.sqrt(v) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Sgd:
    """Plain gradient step; used by tests to inspect raw ascent directions."""

    def __init__(self, params):
        self.params = list(params)

    def step(self, lr):
        for p in self.params:
            if p.grad is not None:
                p.data -= (lr * p.grad).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def _gate_stats(student):
    lines = []
    for name, gs in student.gates.items():
        la = gs.log_alpha.data
        lines.append(f"  {name}: log_alpha min={la.min():.3f} mean={la.mean():.3f} max={la.max():.3f}")
    return "\n".join(lines)


def _check_finite(value, student, where):
    if not np.isfinite(value):
        raise NumericAbort(f"non-finite loss in {where}\ngate statistics:\n{_gate_stats(student)}")


def _main_params(student, dspec):
    return list(student.parameters().values()) + list(dspec.projections)


def _aux_params(student, controller):
    return [gs.log_alpha for gs in student.gates.values()] + controller.multipliers()


def train_step1(teacher, student, controller, dspec, batch, opt_main, opt_aux, rng, step, recipe):
    """One minimax update; returns the metrics row for this step."""
    s1 = recipe.step1
    main_lr = lr_at(min(step + 1, s1.total_steps), s1.warmup_steps, s1.total_steps, s1.main_lr)
    aux_lr = lr_at(min(step + 1, s1.total_steps), s1.warmup_steps, s1.total_steps, s1.aux_lr)
    target = controller.target_at(step)
    loss_fn = DISTILL_MODES[recipe.distill_mode]

    teacher_states = teacher.forward(batch)
    with Tape() as tape:
        samples = student.sample_masks(rng)  # one draw shared across the batch
        masks = {name: s.z for name, s in samples.items()}
        student_states = student.forward(batch, masks=masks)
        distill = loss_fn(teacher_states, student_states, dspec)
        sparsity = current_sparsity(student.gates, controller.layout)
        total = distill + controller.penalty(sparsity, step)
    _check_finite(total.item(), student, f"step1 step {step}")
    tape.backward(total)

    # multipliers maximize the penalty: ascend by flipping their gradients
    for lam in controller.multipliers():
        if lam.grad is not None:
            lam.grad = -lam.grad
    opt_main.step(main_lr)
    opt_aux.step(aux_lr)
    opt_main.zero_grad()
    opt_aux.zero_grad()

    return {
        "step": step,
        "phase": 1,
        "distill_loss": distill.item(),
        "sparsity": sparsity.item(),
        "target": target,
        "lambda1": controller.lambda1.item(),
        "lambda2": controller.lambda2.item(),
        "lr_main": main_lr,
        "lr_aux": aux_lr,
    }


def train_step2(teacher, student, frozen_masks, dspec, batch, opt_main, step, recipe, controller=None):
    """One plain distillation update on the frozen architecture."""
    s2 = recipe.step2
    main_lr = lr_at(min(step + 1, s2.total_steps), s2.warmup_steps, s2.total_steps, s2.main_lr)
    loss_fn = DISTILL_MODES[recipe.distill_mode]
    masks = {name: Tensor(np.asarray(m)) for name, m in frozen_masks.items()}

    teacher_states = teacher.forward(batch)
    with Tape() as tape:
        student_states = student.forward(batch, masks=masks)
        distill = loss_fn(teacher_states, student_states, dspec)
    _check_finite(distill.item(), student, f"step2 step {step}")
    tape.backward(distill)
    opt_main.step(main_lr)
    opt_main.zero_grad()

    return {
        "step": step,
        "phase": 2,
        "distill_loss": distill.item(),
        "sparsity": frozen_sparsity(student, frozen_masks, controller),
        "target": recipe.step1.t_final,
        "lambda1": controller.lambda1.item() if controller else 0.0,
        "lambda2": controller.lambda2.item() if controller else 0.0,
        "lr_main": main_lr,
        "lr_aux": 0.0,
    }


def frozen_sparsity(student, frozen_masks, controller=None):
    """Deterministic-mask sparsity: surviving fraction under hard 0/1 masks."""
    from .sparsity import discrete_param_count

    layout = controller.layout if controller else layout_for_student(student)
    binary = {name: (np.asarray(m) > 0).astype(np.float64) for name, m in frozen_masks.items()}
    return 1.0 - discrete_param_count(binary, layout) / layout.total_prunable


def layout_for_student(student):
    from .encoder import EncoderConfig

    arch = student.encoder.arch
    cfg = EncoderConfig(
        conv_layers=tuple((c.out_channels, c.kernel, c.stride) for c in arch.conv),
        hidden_size=arch.hidden_size,
        num_layers=arch.num_layers,
        num_heads=arch.heads[0],
        ffn_size=arch.ffn[0],
    )
    return layout_for(cfg, prune_conv=student.prune_conv)


def evaluate_step1_objective(teacher, student, controller, dspec, batch, step, recipe):
    """Step-1 objective in evaluation mode: deterministic (noise-free) masks."""
    loss_fn = DISTILL_MODES[recipe.distill_mode]
    masks = {name: Tensor(m) for name, m in student.deterministic_masks().items()}
    teacher_states = teacher.forward(batch)
    student_states = student.forward(batch, masks=masks)
    distill = loss_fn(teacher_states, student_states, dspec)
    sparsity = current_sparsity(student.gates, controller.layout)
    total = distill + controller.penalty(sparsity, step)
    return {
        "total": total.item(),
        "distill_loss": distill.item(),
        "sparsity": sparsity.item(),
        "target": controller.target_at(step),
    }


@dataclass
class TrainResult:
    student: StudentModel
    dspec: DistillSpec
    controller: SparsityController
    frozen_masks: dict
    metrics: list


def run_two_step(recipe: TrainRecipe, teacher: Encoder, dspec=None, gate_kwargs=None) -> TrainResult:
    """Execute Step 1, freeze the masks, then Step 2; deterministic per seed."""
    recipe.validate()
    student = init_student_from_teacher(teacher, prune_conv=recipe.prune_conv, gate_kwargs=gate_kwargs)
    if dspec is None:
        dspec = make_distill_spec(teacher.arch.num_layers, teacher.arch.hidden_size, dtype=teacher.dtype)
    layout = layout_for_student(student)
    controller = SparsityController(
        layout, recipe.step1.t_final, recipe.step1.ramp_steps, dtype=teacher.dtype
    )
    rng = np.random.default_rng([int(recipe.seed), 1])
    metrics = []

    opt_main = Adam(_main_params(student, dspec))
    opt_aux = Adam(_aux_params(student, controller))
    for step in range(recipe.step1.total_steps):
        batch = synth_batch(recipe.seed, step, recipe.batch_size, recipe.seq_len)
        metrics.append(
            train_step1(teacher, student, controller, dspec, batch, opt_main, opt_aux, rng, step, recipe)
        )

    frozen_masks = student.deterministic_masks()

    opt2 = Adam(_main_params(student, dspec))
    for step in range(recipe.step2.total_steps):
        batch = synth_batch(recipe.seed, recipe.step1.total_steps + step, recipe.batch_size, recipe.seq_len)
        metrics.append(
            train_step2(teacher, student, frozen_masks, dspec, batch, opt2, step, recipe, controller)
        )

    return TrainResult(student, dspec, controller, frozen_masks, metrics)
