"""Layer-wise feature distillation from a teacher encoder into a shallower student.

The student copies the teacher's front-end and first transformer blocks, then
one linear prediction head per selected teacher layer regresses that layer's
hidden states from the student's last hidden state.  Per time step the
objective is the L1 distance scaled by ``1/K`` minus the log-sigmoid of the
cosine similarity, summed over time.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .model import EncoderModel, ModelConfig, build_model
from .tensor import NonFiniteError, Tensor, check_finite, default_dtype, no_grad
from .trainer import AdamState, BatchStream, DivergenceError, adam_step, clip_grad_norm, collect_grads

log = logging.getLogger(__name__)


@dataclass
class DistillPlan:
    teacher_layers: tuple[int, ...]
    heads: dict[int, tuple[Tensor, Tensor]]  # layer -> (weight student_dim x teacher_dim, bias)

    def __post_init__(self):
        layers = tuple(int(p) for p in self.teacher_layers)
        if not layers or any(b <= a for a, b in zip(layers, layers[1:])) or layers[0] < 1:
            raise ValueError(f"teacher_layers must be strictly increasing positive indices, got {layers}")
        if set(self.heads) != set(layers):
            raise ValueError("exactly one prediction head per distilled teacher layer")
        self.teacher_layers = layers

    def params(self) -> dict[str, Tensor]:
        out = {}
        for p in self.teacher_layers:
            w, b = self.heads[p]
            out[f"{p}/weight"] = w
            out[f"{p}/bias"] = b
        return out

    def validate_against(self, teacher: EncoderModel, student: EncoderModel) -> None:
        if self.teacher_layers[-1] > teacher.num_layers:
            raise ValueError(f"layer {self.teacher_layers[-1]} exceeds teacher depth {teacher.num_layers}")
        for p, (w, _) in self.heads.items():
            if w.shape != (student.config.model_dim, teacher.config.model_dim):
                raise ValueError(f"prediction head {p} has shape {w.shape}")


def make_plan(teacher_layers: Sequence[int], student_dim: int, teacher_dim: int, seed: int,
              init: str = "random", dtype=None) -> DistillPlan:
    """Prediction heads are fresh random (or identity, when dimensions agree)."""
    dtype = np.dtype(dtype or default_dtype())
    rng = np.random.default_rng(seed)
    heads = {}
    for p in teacher_layers:
        if init == "identity":
            if student_dim != teacher_dim:
                raise ValueError("identity heads need equal student and teacher dimensions")
            w = np.eye(student_dim, dtype=dtype)
        elif init == "random":
            w = (rng.standard_normal((student_dim, teacher_dim)) / np.sqrt(student_dim)).astype(dtype)
        else:
            raise ValueError(f"unknown head init {init!r}")
        heads[int(p)] = (Tensor(w, requires_grad=True, dtype=dtype),
                         Tensor(np.zeros(teacher_dim, dtype=dtype), requires_grad=True, dtype=dtype))
    return DistillPlan(tuple(teacher_layers), heads)


# --------------------------------------------------------------------------- loss

def _check_pair(teacher_feats: Tensor, student_pred: Tensor) -> None:
    if teacher_feats.shape != student_pred.shape:
        raise ValueError(f"shape mismatch: teacher {teacher_feats.shape} vs student {student_pred.shape}")
    if student_pred.ndim not in (2, 3) or min(student_pred.shape) < 1:
        raise ValueError(f"expected T x K or B x T x K features, got {student_pred.shape}")
    check_finite(teacher_feats.data, "teacher features")
    check_finite(student_pred.data, "student predictions")


def distillation_terms(teacher_feats: Tensor, student_pred: Tensor) -> tuple[Tensor, Tensor]:
    """(L1 term, cosine term), each summed over time and averaged over the batch."""
    _check_pair(teacher_feats, student_pred)
    teacher_feats = teacher_feats.detach()
    k = student_pred.shape[-1]
    batch = 1 if student_pred.ndim == 2 else student_pred.shape[0]
    l1 = ops.scale(ops.sum(ops.abs(student_pred - teacher_feats)), 1.0 / (k * batch))
    cos = ops.cosine_similarity(teacher_feats, student_pred)
    neg_log_sig = ops.scale(ops.sum(ops.log(ops.sigmoid(cos))), -1.0 / batch)
    return l1, neg_log_sig


def distillation_loss(teacher_feats: Tensor, student_pred: Tensor) -> Tensor:
    l1, cos = distillation_terms(teacher_feats, student_pred)
    return l1 + cos


def init_student_from_teacher(teacher: EncoderModel, student_cfg: ModelConfig) -> EncoderModel:
    """Copy the teacher front-end and blocks ``1..M`` into an ``M``-block student."""
    tc = teacher.config
    if (student_cfg.conv_layers != tc.conv_layers or student_cfg.model_dim != tc.model_dim
            or student_cfg.pos_conv != tc.pos_conv or student_cfg.ffn_dim != tc.ffn_dim
            or student_cfg.num_heads != tc.num_heads):
        raise ValueError("student front-end/block dimensions must match the teacher's")
    if student_cfg.num_transformer_layers > tc.num_transformer_layers:
        raise ValueError(f"student depth {student_cfg.num_transformer_layers} exceeds teacher depth "
                         f"{tc.num_transformer_layers}")
    dtype = next(iter(teacher.params.values())).dtype
    student = build_model(student_cfg, seed=0, dtype=dtype)
    for name, t in student.params.items():
        t.data = teacher.params[name].data.copy()
    return student


# --------------------------------------------------------------------------- training loop

@dataclass
class DistillStep:
    step: int
    per_layer: dict[int, float]
    total: float


@dataclass
class DistillResult:
    student: EncoderModel
    plan: DistillPlan
    trace: list[DistillStep] = field(default_factory=list)
    optimizer: AdamState | None = None


def distill_batch_loss(teacher_states: list[np.ndarray], student: EncoderModel, plan: DistillPlan,
                       waves: np.ndarray, rng=None) -> tuple[Tensor, dict[int, Tensor]]:
    """Mean over distilled layers of the per-layer loss; ``teacher_states[i]`` pairs with ``plan.teacher_layers[i]``."""
    h = student.forward_hidden(waves, rng=rng)[-1]
    per_layer = {}
    for p, target in zip(plan.teacher_layers, teacher_states):
        w, b = plan.heads[p]
        per_layer[p] = distillation_loss(Tensor(target, dtype=target.dtype), ops.linear(h, w, b))
    total = per_layer[plan.teacher_layers[0]]
    for p in plan.teacher_layers[1:]:
        total = total + per_layer[p]
    return ops.scale(total, 1.0 / len(per_layer)), per_layer


def teacher_targets(teacher: EncoderModel, plan: DistillPlan, waves: np.ndarray) -> list[np.ndarray]:
    with no_grad():
        states = teacher.forward_hidden(waves, upto_layer=plan.teacher_layers[-1])
    return [states[p].data for p in plan.teacher_layers]


def run_distillation(teacher: EncoderModel, student: EncoderModel, plan: DistillPlan, data: np.ndarray,
                     steps: int, seed: int, batch_size: int = 16, lr: float = 1e-4,
                     clip: float | None = 5.0) -> DistillResult:
    """Train ``student`` (and the plan's heads) to predict teacher hidden states.

    ``data`` is an ``N x S`` array of unlabeled waveforms, visited in
    per-epoch shuffled order.  The teacher is frozen for the duration.
    """
    plan.validate_against(teacher, student)
    teacher.frozen = True
    params = {f"srl/{k}": v for k, v in student.params.items()}
    params.update({f"distill/{k}": v for k, v in plan.params().items()})
    opt = AdamState(lr=lr)
    stream = BatchStream(len(data), batch_size, seed)
    result = DistillResult(student, plan, optimizer=opt)
    for step in range(steps):
        idx = stream.next()
        waves = data[idx]
        targets = teacher_targets(teacher, plan, waves)
        for t in params.values():
            t.grad = None
        total, per_layer = distill_batch_loss(targets, student, plan, waves)
        if not np.isfinite(total.item()):
            raise DivergenceError(step, "distillation loss is not finite")
        total.backward()
        grads = collect_grads(params)
        if clip:
            clip_grad_norm(grads, clip)
        try:
            adam_step(params, grads, opt)
        except NonFiniteError as exc:
            raise DivergenceError(step, str(exc)) from exc
        result.trace.append(DistillStep(step, {p: v.item() for p, v in per_layer.items()}, total.item()))
        if step % 50 == 0:
            log.info("distill step %d loss %.4f", step, total.item())
    return result


def write_distill_trace(path, trace: list[DistillStep], layers: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"layer{p}" for p in layers] + ["total"])
        for row in trace:
            w.writerow([row.step] + [repr(row.per_layer[p]) for p in layers] + [repr(row.total)])
