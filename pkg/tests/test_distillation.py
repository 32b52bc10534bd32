"""Distillation losses: hand examples, teacher isolation, projection gradients."""

import numpy as np
import pytest

from distillprune.distillation import (
    DistillSpec,
    default_match_layers,
    feature_distance,
    layer_to_layer_loss,
    make_distill_spec,
    prediction_layer_loss,
)
from distillprune.encoder import init_student_from_teacher, init_teacher, toy_config
from distillprune.tensor import ShapeError, Tape, Tensor, check_gradients


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestFeatureDistance:
    def test_identical_features_are_zero(self):
        a = t64(np.random.default_rng(0).standard_normal((5, 8)))
        assert feature_distance(a, a).item() == pytest.approx(0.0, abs=1e-7)

    def test_antipodal_cosine(self):
        a = t64(np.random.default_rng(1).standard_normal((4, 6)))
        b = t64(-a.data)
        assert feature_distance(a, b, l1_weight=0.0, cos_weight=1.0).item() == pytest.approx(2.0, abs=1e-6)

    def test_hand_evaluated_doubling(self):
        b = t64(np.ones((3, 4)))
        a = t64(2.0 * np.ones((3, 4)))
        # L1 term: mean_dim |2-1| = 1; cosine of parallel vectors: 0
        assert feature_distance(a, b, 1.0, 1.0).item() == pytest.approx(1.0, abs=1e-6)

    def test_shape_mismatch_fails(self):
        with pytest.raises(ShapeError):
            feature_distance(t64(np.ones((3, 4))), t64(np.ones((4, 3))))

    def test_frame_permutation_invariance(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((10, 6))
        b = rng.standard_normal((10, 6))
        perm = rng.permutation(10)
        before = feature_distance(t64(a), t64(b)).item()
        after = feature_distance(t64(a[perm]), t64(b[perm])).item()
        assert before == pytest.approx(after, rel=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = t64(rng.standard_normal((4, 5)))
            b = t64(rng.standard_normal((4, 5)))
            assert feature_distance(a, b).item() >= 0.0


class TestSpec:
    def test_default_match_layers_scale_with_depth(self):
        assert default_match_layers(6) == [0, 2, 4, 6]
        assert default_match_layers(12) == [0, 4, 8, 12]
        assert default_match_layers(2) == [0, 1, 2]

    def test_toy_spec_exposes_four_identity_projections(self):
        spec = make_distill_spec(6, 32)
        assert spec.match_layers == [0, 2, 4, 6]
        assert len(spec.projections) == 4
        for w in spec.projections:
            assert w.shape == (32, 32)
            np.testing.assert_array_equal(w.data, np.eye(32, dtype=np.float32))

    def test_validation_rejects_bad_sets(self):
        with pytest.raises(ValueError):
            make_distill_spec(6, 32, match_layers=[0, 7])
        with pytest.raises(ValueError):
            make_distill_spec(6, 32, match_layers=[2, 0])
        with pytest.raises(ValueError):
            DistillSpec([0, 2], projections=[Tensor(np.eye(4))]).validate(6)


class TestLayerToLayer:
    def test_copied_student_scores_zero(self):
        teacher = init_teacher(toy_config(), seed=0)
        student = init_student_from_teacher(teacher)
        spec = make_distill_spec(6, 32)
        x = np.random.default_rng(4).standard_normal(64).astype(np.float32)
        loss = layer_to_layer_loss(teacher.forward(x), student.forward(x), spec)
        assert loss.item() == pytest.approx(0.0, abs=1e-5)

    def test_sum_over_matched_layers(self):
        # four matched layers at distance 0.25 each sum to 1
        rng = np.random.default_rng(5)
        states = [t64(rng.standard_normal((3, 8))) for _ in range(7)]
        spec = make_distill_spec(6, 8, dtype=np.float64)
        per_layer = [
            feature_distance(states[i], states[i]).item() for i in spec.match_layers
        ]
        assert layer_to_layer_loss(states, states, spec).item() == pytest.approx(
            sum(per_layer), abs=1e-6
        )

    def test_missing_layer_fails(self):
        spec = make_distill_spec(6, 8, dtype=np.float64)
        short = [t64(np.ones((2, 8)))] * 5
        with pytest.raises(ValueError):
            layer_to_layer_loss(short, short, spec)

    def test_teacher_gets_no_gradient(self):
        teacher = init_teacher(toy_config(), seed=1)
        student = init_student_from_teacher(teacher)
        spec = make_distill_spec(6, 32)
        x = np.random.default_rng(6).standard_normal(64).astype(np.float32)
        # make the student differ so the loss is nontrivial
        student.parameters()["layers.0.ffn.w1"].data *= 1.1
        with Tape() as tape:
            loss = layer_to_layer_loss(teacher.forward(x), student.forward(x), spec)
        tape.backward(loss)
        assert loss.item() > 0
        assert all(t.grad is None for t in teacher.parameters().values())
        assert student.parameters()["layers.0.ffn.w1"].grad is not None

    def test_projection_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        tea = [t64(rng.standard_normal((4, 6))) for _ in range(3)]
        stu = [t64(rng.standard_normal((4, 6))) for _ in range(3)]
        spec = make_distill_spec(2, 6, match_layers=[0, 2], dtype=np.float64)

        def f(w):
            spec.projections[1] = w
            return layer_to_layer_loss(tea, stu, spec)

        report = check_gradients(f, spec.projections[1], eps=1e-6)
        assert report.max_rel_err < 1e-4


class TestPredictionLayer:
    def test_copied_student_final_layer_only(self):
        teacher = init_teacher(toy_config(), seed=2)
        student = init_student_from_teacher(teacher)
        spec = make_distill_spec(6, 32, match_layers=[6])
        x = np.random.default_rng(8).standard_normal(64).astype(np.float32)
        loss = prediction_layer_loss(teacher.forward(x), student.forward(x), spec)
        assert loss.item() == pytest.approx(0.0, abs=1e-5)

    def test_drops_conv_output_projection(self):
        rng = np.random.default_rng(9)
        tea = [t64(rng.standard_normal((3, 8))) for _ in range(7)]
        stu = [t64(rng.standard_normal((3, 8))) for _ in range(7)]
        spec = make_distill_spec(6, 8, dtype=np.float64)
        by_hand = sum(
            feature_distance(tea[i], stu[-1]).item() for i in (2, 4, 6)
        )  # identity projections
        assert prediction_layer_loss(tea, stu, spec).item() == pytest.approx(by_hand, rel=1e-9)

    def test_differs_from_layer_to_layer_on_random_models(self):
        teacher = init_teacher(toy_config(), seed=3)
        other = init_teacher(toy_config(), seed=4)
        student = init_student_from_teacher(other)
        spec = make_distill_spec(6, 32)
        x = np.random.default_rng(10).standard_normal(64).astype(np.float32)
        tea, stu = teacher.forward(x), student.forward(x)
        assert prediction_layer_loss(tea, stu, spec).item() != pytest.approx(
            layer_to_layer_loss(tea, stu, spec).item(), rel=1e-6
        )
