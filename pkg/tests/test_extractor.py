"""Extraction: excision, folding, equivalence, counting, and reporting."""

import numpy as np
import pytest

from distillprune.encoder import StudentModel, init_student_from_teacher, init_teacher, toy_config
from distillprune.extractor import (
    ExtractionError,
    extract,
    gated_param_count,
    parse_architecture_csv,
    report_architecture,
    verify_equivalence,
)
from distillprune.sparsity import discrete_param_count
from distillprune.trainer import layout_for_student

OPEN, FRACTIONAL, DEAD = 4.0, 0.5, -8.0


def crafted_student(seed=11):
    """Student with a mix of dead, fractional and open gates."""
    teacher = init_teacher(toy_config(), seed=seed)
    student = init_student_from_teacher(teacher)
    rng = np.random.default_rng(seed + 1)
    for gs in student.gates.values():
        gs.log_alpha.data[:] = rng.choice([DEAD, DEAD, FRACTIONAL, OPEN], size=gs.group_count)
    for k in range(3):
        student.gates[f"conv.{k}"].log_alpha.data[:2] = OPEN  # keep the signal path alive
    student.gates["layers.3.heads"].log_alpha.data[:] = DEAD  # one layer loses attention
    student.gates["layers.5.ffn"].log_alpha.data[:] = DEAD  # another loses its FFN
    return student


class TestExtraction:
    def test_all_open_gates_give_identical_parameters(self):
        student = init_student_from_teacher(init_teacher(toy_config(), seed=0))
        pruned, record = extract(student)
        assert set(pruned.params) == set(student.parameters())
        for name, t in pruned.params.items():
            np.testing.assert_array_equal(t.data, student.parameters()[name].data)
        assert record.gated_params == record.gated_params_original
        assert record.total_params == record.total_params_original

    def test_dead_head_layer_drops_attention_block(self):
        student = crafted_student()
        pruned, record = extract(student)
        assert record.heads[3] == (0, 4)
        assert not any(name.startswith("layers.3.attn") for name in pruned.params)
        assert pruned.arch.heads[3] == 0
        # the FFN path of the same layer survives
        assert any(name.startswith("layers.3.ffn") for name in pruned.params)

    def test_dead_ffn_layer_keeps_attention(self):
        student = crafted_student()
        pruned, record = extract(student)
        assert record.ffn_units[5] == (0, 64)
        assert not any(name.startswith("layers.5.ffn") for name in pruned.params)
        assert any(name.startswith("layers.5.attn") for name in pruned.params)

    def test_masked_and_extracted_forward_agree(self):
        student = crafted_student()
        pruned, _ = extract(student)
        report = verify_equivalence(student, pruned, num_inputs=20, tol=1e-5)
        assert report.passed, (report.max_abs, report.max_rel)

    def test_extracted_count_equals_discrete_count(self):
        student = crafted_student()
        pruned, record = extract(student)
        layout = layout_for_student(student)
        binary = {name: (m > 0).astype(float) for name, m in student.deterministic_masks().items()}
        assert record.gated_params == discrete_param_count(binary, layout)
        assert record.gated_params == gated_param_count(pruned.arch, prune_conv=True)

    def test_conv_without_survivors_fails_naming_layer(self):
        student = crafted_student()
        student.gates["conv.1"].log_alpha.data[:] = DEAD
        with pytest.raises(ExtractionError, match="conv layer 1"):
            extract(student)

    def test_idempotent(self):
        student = crafted_student()
        pruned, _ = extract(student)
        wrapper = StudentModel(encoder=pruned, gates={}, prune_conv=True)
        again, _ = extract(wrapper, masks={})
        assert set(again.params) == set(pruned.params)
        for name, t in again.params.items():
            np.testing.assert_array_equal(t.data, pruned.params[name].data)

    def test_no_conv_gates_leaves_conv_untouched(self):
        teacher = init_teacher(toy_config(), seed=2)
        student = init_student_from_teacher(teacher, prune_conv=False)
        student.gates["layers.0.ffn"].log_alpha.data[:10] = DEAD
        pruned, record = extract(student)
        assert record.conv_channels == [(16, 16), (16, 16), (16, 16)]
        assert record.ffn_units[0] == (54, 64)
        np.testing.assert_array_equal(pruned.params["conv.0.weight"].data, student.parameters()["conv.0.weight"].data)


class TestVerifyEquivalence:
    def test_pruned_vs_itself_is_zero(self):
        student = crafted_student()
        pruned, _ = extract(student)
        wrapper = StudentModel(encoder=pruned, gates={}, prune_conv=True)
        report = verify_equivalence(wrapper, pruned, masks={}, num_inputs=5)
        assert report.max_abs == 0.0

    def test_detects_skipped_fold(self):
        student = crafted_student()
        masks = student.deterministic_masks()
        assert np.any((masks["layers.1.ffn"] > 0) & (masks["layers.1.ffn"] < 1))
        # extract as if one fractional FFN gate were fully open: fold skipped
        tampered = {k: v.copy() for k, v in masks.items()}
        frac = np.flatnonzero((tampered["layers.1.ffn"] > 0) & (tampered["layers.1.ffn"] < 1))[0]
        tampered["layers.1.ffn"][frac] = 1.0
        pruned, _ = extract(student, masks=tampered)
        report = verify_equivalence(student, pruned, masks=masks, num_inputs=5, tol=1e-5)
        assert not report.passed


class TestReport:
    def test_unpruned_rows_show_full_survival(self):
        student = init_student_from_teacher(init_teacher(toy_config(), seed=0))
        _, record = extract(student)
        text = report_architecture(record, fmt="text")
        assert "conv" in text and "heads" in text and "ffn" in text
        for surv, orig in record.conv_channels + record.heads + record.ffn_units:
            assert surv == orig

    def test_zero_heads_with_nonzero_ffn_in_same_row(self):
        student = crafted_student()
        _, record = extract(student)
        assert record.heads[3][0] == 0 and record.ffn_units[3][0] > 0

    def test_csv_round_trip(self):
        student = crafted_student()
        _, record = extract(student)
        rendered = report_architecture(record, fmt="csv")
        assert parse_architecture_csv(rendered) == record

    def test_unknown_format_rejected(self):
        student = crafted_student()
        _, record = extract(student)
        with pytest.raises(ValueError):
            report_architecture(record, fmt="json")
