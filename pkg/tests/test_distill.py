import math

import numpy as np
import pytest

from distilsrl.distill import (DistillPlan, distill_batch_loss, distillation_loss, distillation_terms,
                               init_student_from_teacher, make_plan, run_distillation, teacher_targets,
                               write_distill_trace)
from distilsrl.data import SynthSpec, synthesize
from distilsrl.gradcheck import gradcheck
from distilsrl.model import build_model, toy_config
from distilsrl.tensor import Tensor
from gradcases import distill_pipeline_error

LOG1P_EXP_M1 = math.log1p(math.exp(-1.0))  # 0.3132617...


def scalar_distill(f, fbar):
    """Sum over rows of mean |f - fbar| minus log sigmoid(cos), one scalar at a time."""
    total = 0.0
    for row, ref in zip(f, fbar):
        k = len(row)
        l1 = sum(abs(a - b) for a, b in zip(row, ref)) / k
        dot = sum(a * b for a, b in zip(row, ref))
        na = math.sqrt(sum(a * a for a in row))
        nb = math.sqrt(sum(b * b for b in ref))
        cos = dot / (na * nb)
        total += l1 + math.log1p(math.exp(-cos))
    return total


class TestLossValues:
    def test_identical_single_row(self, f64):
        f = Tensor(np.array([[0.5, -1.0, 2.0]]))
        assert abs(distillation_loss(f, f).item() - 0.3132617) < 1e-7

    def test_identical_rows_scale_with_time(self, f64, rng):
        f = Tensor(rng.standard_normal((7, 5)))
        assert abs(distillation_loss(f, f).item() - 7 * LOG1P_EXP_M1) < 1e-6

    def test_opposite_rows(self, f64):
        teacher = Tensor(-np.ones((1, 4)))
        student = Tensor(np.ones((1, 4)))
        assert abs(distillation_loss(teacher, student).item() - (2 + math.log1p(math.e))) < 1e-12
        assert abs(distillation_loss(teacher, student).item() - 3.3132617) < 1e-7

    @pytest.mark.parametrize("seed", range(5))
    def test_scalar_oracle(self, f64, seed):
        rng = np.random.default_rng(seed)
        f, fbar = rng.standard_normal((5, 8)), rng.standard_normal((5, 8))
        got = distillation_loss(Tensor(fbar), Tensor(f)).item()
        assert abs(got - scalar_distill(f, fbar)) < 1e-10

    def test_batch_is_mean_of_items(self, f64, rng):
        f, fbar = rng.standard_normal((3, 4, 6)), rng.standard_normal((3, 4, 6))
        items = [distillation_loss(Tensor(fbar[i]), Tensor(f[i])).item() for i in range(3)]
        assert abs(distillation_loss(Tensor(fbar), Tensor(f)).item() - np.mean(items)) < 1e-12

    def test_always_positive(self, f64, rng):
        for _ in range(20):
            f = rng.standard_normal((3, 4)) * 10
            assert distillation_loss(Tensor(f), Tensor(f)).item() > 0

    def test_shape_mismatch(self, f64):
        with pytest.raises(ValueError, match="shape mismatch"):
            distillation_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


class TestLossProperties:
    def test_time_permutation(self, f64, rng):
        f, fbar = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
        perm = rng.permutation(6)
        a = distillation_loss(Tensor(fbar), Tensor(f)).item()
        b = distillation_loss(Tensor(fbar[perm]), Tensor(f[perm])).item()
        assert abs(a - b) < 1e-12

    @pytest.mark.parametrize("c", [0.1, 2.0, 37.5])
    def test_scaling_both_inputs(self, f64, rng, c):
        f, fbar = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        l1, cos = distillation_terms(Tensor(fbar), Tensor(f))
        l1c, cosc = distillation_terms(Tensor(c * fbar), Tensor(c * f))
        assert abs(cosc.item() - cos.item()) < 1e-12
        assert abs(l1c.item() - c * l1.item()) < 1e-10 * c

    def test_teacher_side_gets_no_gradient(self, f64, rng):
        teacher = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        student = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        distillation_loss(teacher, student).backward()
        assert teacher.grad is None
        assert student.grad is not None

    def test_gradient_wrt_prediction(self, f64):
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            teacher = Tensor(rng.standard_normal((2, 5, 6)))
            student = Tensor(rng.standard_normal((2, 5, 6)), requires_grad=True)
            worst = max(worst, gradcheck(lambda: distillation_loss(teacher, student), [student]))
        assert worst < 1e-4


def test_gradients_through_student():
    worst = max(distill_pipeline_error(seed) for seed in range(20))
    assert worst < 1e-4


@pytest.fixture(scope="module")
def teacher():
    return build_model(toy_config(4), seed=21)


@pytest.fixture(scope="module")
def setup():
    teacher = build_model(toy_config(4), seed=2)
    waves, _ = synthesize(SynthSpec(num_keywords=4, num_speakers=4, train_per_pair=2, test_per_pair=1))
    return teacher, waves


class TestStudentInit:
    def test_copies_front_end_and_first_layers(self, teacher):
        student = init_student_from_teacher(teacher, toy_config(2))
        for name, p in student.named_parameters():
            assert np.array_equal(p.data, teacher[name].data), name
        assert "layers.3.attn.q.weight" not in student.params

    def test_copy_is_independent(self, teacher):
        student = init_student_from_teacher(teacher, toy_config(2))
        student["layers.1.attn.q.weight"].data[0, 0] += 1.0
        assert student["layers.1.attn.q.weight"].data[0, 0] != teacher["layers.1.attn.q.weight"].data[0, 0]

    def test_student_states_match_teacher_prefix(self, teacher, rng):
        student = init_student_from_teacher(teacher, toy_config(2))
        wave = rng.standard_normal((2, 640))
        t_states = teacher.forward_hidden(wave, upto_layer=2)
        s_states = student.forward_hidden(wave)
        for a, b in zip(s_states, t_states):
            assert np.array_equal(a.data, b.data)

    def test_full_depth_with_identity_heads(self, teacher, rng):
        student = init_student_from_teacher(teacher, toy_config(4))
        plan = make_plan((2, 3, 4), 64, 64, seed=0, init="identity")
        waves = rng.standard_normal((2, 640))
        total, _ = distill_batch_loss(teacher_targets(teacher, plan, waves), student, plan, waves)
        assert np.isfinite(total.item())

    def test_mismatched_dim(self, teacher):
        cfg = toy_config(2)
        with pytest.raises(ValueError):
            init_student_from_teacher(teacher, type(cfg)(cfg.conv_layers, 32, 2, 4, 128, cfg.pos_conv))

    def test_too_deep(self, teacher):
        with pytest.raises(ValueError):
            init_student_from_teacher(teacher, toy_config(5))


class TestPlan:
    def test_one_head_per_layer(self):
        plan = make_plan((2, 4), 8, 6, seed=1)
        assert set(plan.heads) == {2, 4}
        assert plan.heads[2][0].shape == (8, 6)

    @pytest.mark.parametrize("layers", [(3, 2), (2, 2), (0, 1), ()])
    def test_layers_must_increase(self, layers):
        with pytest.raises(ValueError):
            make_plan(layers, 8, 8, seed=0)

    def test_missing_head(self):
        plan = make_plan((1, 2), 8, 8, seed=0)
        with pytest.raises(ValueError):
            DistillPlan((1, 2, 3), plan.heads)

    def test_identity_needs_equal_dims(self):
        with pytest.raises(ValueError):
            make_plan((1,), 8, 6, seed=0, init="identity")

    def test_deeper_than_teacher(self):
        teacher = build_model(toy_config(2), 0)
        student = init_student_from_teacher(teacher, toy_config(1))
        with pytest.raises(ValueError, match="exceeds"):
            make_plan((1, 3), 64, 64, 0).validate_against(teacher, student)


class TestRun:
    def test_zero_steps(self, setup):
        teacher, waves = setup
        student = init_student_from_teacher(teacher, toy_config(2))
        before = student.state_dict()
        res = run_distillation(teacher, student, make_plan((2, 3, 4), 64, 64, 0), waves, steps=0, seed=0)
        assert res.trace == []
        assert all(np.array_equal(before[k], v.data) for k, v in student.params.items())

    def test_teacher_untouched_and_trace_recorded(self, setup, tmp_path):
        teacher, waves = setup
        before = teacher.state_dict()
        student = init_student_from_teacher(teacher, toy_config(2))
        res = run_distillation(teacher, student, make_plan((2, 3, 4), 64, 64, 0), waves, steps=500, seed=0,
                               lr=1e-3)
        assert all(np.array_equal(before[k], v.data) for k, v in teacher.params.items())
        assert len(res.trace) == 500
        first = np.mean([s.total for s in res.trace[:50]])
        last = np.mean([s.total for s in res.trace[-50:]])
        assert last < first
        path = tmp_path / "trace.csv"
        write_distill_trace(path, res.trace, (2, 3, 4))
        lines = path.read_text().splitlines()
        assert lines[0] == "step,layer2,layer3,layer4,total"
        assert len(lines) == 501

    def test_deterministic(self, setup):
        teacher, waves = setup
        traces = []
        for _ in range(2):
            student = init_student_from_teacher(teacher, toy_config(2))
            res = run_distillation(teacher, student, make_plan((2, 3, 4), 64, 64, 0), waves, steps=5, seed=3)
            traces.append([s.total for s in res.trace])
        assert traces[0] == traces[1]
