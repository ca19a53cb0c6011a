import math

import numpy as np
import pytest

from distilsrl.data import SynthSpec, corpus_from_memory, synthesize
from distilsrl.heads import KWS, SV, build_head
from distilsrl.model import build_model, toy_config
from distilsrl.tensor import NonFiniteError, Tensor
from distilsrl.trainer import (AdamState, BatchStream, LabeledSet, TrainSchedule, adam_step, clip_grad_norm,
                               multitask_finetune, singletask_finetune, write_trace)


def scalar_adam(x, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(x)
    return out


@pytest.fixture(scope="module")
def corpus():
    waves, manifest = synthesize(SynthSpec(num_keywords=4, num_speakers=3, train_per_pair=2, test_per_pair=1))
    return corpus_from_memory(waves, manifest, "train")


@pytest.fixture
def data(corpus):
    return {KWS: LabeledSet(corpus.waves, corpus.keywords), SV: LabeledSet(corpus.waves, corpus.speakers)}


def fresh(seed=0):
    return build_model(toy_config(1), seed), {KWS: build_head(KWS, 64, 4, seed + 1),
                                             SV: build_head(SV, 64, 3, seed + 2)}


class TestAdam:
    def test_zero_gradient_moves_nothing(self, rng):
        p = {"w": Tensor(rng.standard_normal((3, 4)))}
        before = p["w"].data.copy()
        st = AdamState(t=17)
        for _ in range(3):
            adam_step(p, {"w": np.zeros((3, 4))}, st)
        assert np.array_equal(p["w"].data, before)

    @pytest.mark.parametrize("g", [3.0, -0.02, 1e3])
    def test_first_step_is_lr_sized(self, f64, g):
        p = {"w": Tensor(np.array([1.0]))}
        adam_step(p, {"w": np.array([g])}, AdamState(lr=1e-4))
        assert abs((1.0 - p["w"].data[0]) - math.copysign(1e-4, g)) < 1e-9

    def test_matches_scalar_reference(self, f64, rng):
        grads = rng.standard_normal(10)
        p = {"w": Tensor(np.array([0.3]))}
        st = AdamState(lr=1e-3)
        traj = []
        for g in grads:
            adam_step(p, {"w": np.array([g])}, st)
            traj.append(p["w"].data[0])
        np.testing.assert_allclose(traj, scalar_adam(0.3, grads), rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            adam_step({"w": Tensor(np.zeros(3))}, {"w": np.zeros(4)}, AdamState())

    def test_non_finite_gradient(self):
        with pytest.raises(NonFiniteError):
            adam_step({"w": Tensor(np.zeros(2))}, {"w": np.array([1.0, np.inf])}, AdamState())

    def test_absent_gradient_keeps_state(self, f64):
        p = {"a": Tensor(np.zeros(1)), "b": Tensor(np.zeros(1))}
        st = AdamState()
        adam_step(p, {"a": np.ones(1)}, st)
        adam_step(p, {"a": np.ones(1)}, st)
        assert st.steps == {"a": 2}
        assert p["b"].data[0] == 0.0


class TestClip:
    def test_scales_to_max_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
        total = math.sqrt(grads["a"][0] ** 2 + grads["b"][0] ** 2)
        assert total == pytest.approx(1.0)
        assert grads["a"][0] / grads["b"][0] == pytest.approx(0.75)

    def test_small_norm_untouched(self):
        grads = {"a": np.array([0.1, 0.2])}
        clip_grad_norm(grads, 5.0)
        assert np.array_equal(grads["a"], [0.1, 0.2])


class TestBatchStream:
    def test_each_epoch_is_a_permutation(self):
        s = BatchStream(10, 4, seed=3)
        seen = np.concatenate([s.next() for _ in range(5)])
        assert sorted(seen[:10]) == list(range(10))
        assert sorted(seen[10:20]) == list(range(10))

    def test_epochs_reshuffle(self):
        s = BatchStream(50, 50, seed=3)
        assert not np.array_equal(s.next(), s.next())

    def test_resume_from_position(self):
        a = BatchStream(7, 3, seed=9)
        for _ in range(4):
            a.next()
        b = BatchStream(7, 3, seed=9, position=a.position)
        assert all(np.array_equal(a.next(), b.next()) for _ in range(5))


class TestSchedule:
    def test_alternation(self, data):
        srl, heads = fresh()
        res = multitask_finetune(srl, heads, data, TrainSchedule((KWS, SV), 6, batch_size=4))
        assert [r.task for r in res.trace] == [KWS, SV, KWS, SV, KWS, SV]
        assert [r.iteration for r in res.trace] == list(range(6))

    def test_unknown_task(self):
        with pytest.raises(ValueError):
            TrainSchedule(("asr",), 3)

    def test_missing_head(self, data):
        srl, heads = fresh()
        with pytest.raises(ValueError, match="no head"):
            multitask_finetune(srl, {KWS: heads[KWS]}, data, TrainSchedule((KWS, SV), 2))

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            LabeledSet(np.zeros((0, 640)), np.zeros(0))


class TestFinetune:
    def test_freeze_touches_heads_only(self, data):
        srl, heads = fresh()
        before = srl.state_dict()
        head_before = {t: h.weight.data.copy() for t, h in heads.items()}
        multitask_finetune(srl, heads, data, TrainSchedule((KWS, SV), 50, batch_size=4, freeze_srl=True))
        assert all(np.array_equal(before[k], v.data) for k, v in srl.params.items())
        assert all(not np.array_equal(head_before[t], h.weight.data) for t, h in heads.items())
        assert not srl.frozen

    def test_single_task_leaves_other_head(self, data):
        srl, heads = fresh()
        sv_before = heads[SV].weight.data.copy()
        kws_before = heads[KWS].weight.data.copy()
        singletask_finetune(srl, heads, data, TrainSchedule((KWS,), 4, batch_size=4))
        assert np.array_equal(heads[SV].weight.data, sv_before)
        assert not np.array_equal(heads[KWS].weight.data, kws_before)

    def test_single_task_needs_one_task(self, data):
        srl, heads = fresh()
        with pytest.raises(ValueError):
            singletask_finetune(srl, heads, data, TrainSchedule((KWS, SV), 2))

    def test_zero_iterations(self, data):
        srl, heads = fresh()
        before = srl.state_dict()
        res = multitask_finetune(srl, heads, data, TrainSchedule((KWS, SV), 0))
        assert res.trace == []
        assert all(np.array_equal(before[k], v.data) for k, v in srl.params.items())

    def test_bit_identical_traces(self, data):
        traces = []
        for _ in range(2):
            srl, heads = fresh()
            res = multitask_finetune(srl, heads, data, TrainSchedule((KWS, SV), 6, batch_size=4, seed=5))
            traces.append([r.loss for r in res.trace])
        assert traces[0] == traces[1]

    def test_checkpoint_callback_cadence(self, data):
        srl, heads = fresh()
        seen = []
        multitask_finetune(srl, heads, data, TrainSchedule((KWS, SV), 8, batch_size=4), checkpoint_every=3,
                           on_checkpoint=lambda state, trace: seen.append((state.iteration, len(trace))))
        assert seen == [(3, 3), (6, 6)]

    def test_resume_equals_uninterrupted(self, data):
        srl, heads = fresh()
        full = multitask_finetune(srl, heads, data, TrainSchedule((KWS, SV), 8, batch_size=4, seed=2))

        srl, heads = fresh()
        part = multitask_finetune(srl, heads, data, TrainSchedule((KWS, SV), 3, batch_size=4, seed=2))
        rest = multitask_finetune(srl, heads, data, TrainSchedule((KWS, SV), 8, batch_size=4, seed=2),
                                  state=part.state)
        assert [r.loss for r in part.trace + rest.trace] == [r.loss for r in full.trace]
        assert [r.iteration for r in rest.trace] == list(range(3, 8))

    def test_per_task_optimizers(self, data):
        srl, heads = fresh()
        sched = TrainSchedule((KWS, SV), 4, batch_size=4, shared_optimizer=False)
        res = multitask_finetune(srl, heads, data, sched)
        assert set(res.state.optimizers) == {KWS, SV}
        assert res.state.optimizers[KWS].t == 2

    def test_trace_csv(self, data, tmp_path):
        srl, heads = fresh()
        res = multitask_finetune(srl, heads, data, TrainSchedule((KWS, SV), 2, batch_size=4))
        path = tmp_path / "trace.csv"
        write_trace(path, res.trace)
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration,task,loss"
        assert lines[1].startswith("0,kws,")
        assert float(lines[2].split(",")[2]) == res.trace[1].loss
