"""Adam, batch streams and the alternating multi-task fine-tuning loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .heads import KWS, SV, TASKS, TaskHead, kws_logits, sv_cosines, task_loss
from .model import EncoderModel
from .seeding import derive_seed
from .tensor import NonFiniteError, Tensor, check_finite, no_grad

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, message: str = "loss is not finite"):
        super().__init__(f"diverged at iteration {iteration}: {message}")
        self.iteration = iteration


# --------------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)  # per-parameter update counts


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], st: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    Only parameters present in ``grads`` move; their moments and step counts
    advance, the rest are left alone (a head that did not take part in this
    iteration keeps its state).
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        check_finite(g, f"gradient of {name}")
    st.t += 1
    for name, g in grads.items():
        p = params[name]
        m = st.m.get(name)
        if m is None:
            m = st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        v = st.v[name]
        k = st.steps.get(name, 0) + 1
        st.steps[name] = k
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * (g * g)
        mhat = m / (1.0 - st.beta1 ** k)
        vhat = v / (1.0 - st.beta2 ** k)
        p.data -= (st.lr * mhat / (np.sqrt(vhat) + st.eps)).astype(p.dtype)


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.grad for name, p in params.items() if p.requires_grad and p.grad is not None}


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients together so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * grads[name].dtype.type(factor)
    return total


# --------------------------------------------------------------------------- data

@dataclass
class LabeledSet:
    waves: np.ndarray  # N x S
    labels: np.ndarray  # N

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.waves) == 0:
            raise ValueError("empty dataset")
        if len(self.waves) != len(self.labels):
            raise ValueError("waves and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)


class BatchStream:
    """Endless stream of indices: a fresh seeded permutation per epoch.

    The stream is a pure function of ``(n, seed, position)``, so a resumed
    run reconstructs it from the saved position.
    """

    def __init__(self, n: int, batch_size: int, seed: int, position: int = 0):
        if n < 1 or batch_size < 1:
            raise ValueError("need a non-empty dataset and a positive batch size")
        self.n, self.batch_size, self.seed = n, batch_size, seed
        self.position = position
        self._epoch = -1
        self._perm = None

    def _permutation(self, epoch: int) -> np.ndarray:
        if epoch != self._epoch:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch]))
            self._perm = rng.permutation(self.n)
            self._epoch = epoch
        return self._perm

    def next(self) -> np.ndarray:
        out = np.empty(self.batch_size, dtype=np.int64)
        for i in range(self.batch_size):
            epoch, offset = divmod(self.position, self.n)
            out[i] = self._permutation(epoch)[offset]
            self.position += 1
        return out


# --------------------------------------------------------------------------- fine-tuning

@dataclass
class TrainSchedule:
    tasks: tuple[str, ...]
    max_iterations: int
    batch_size: int = 16
    freeze_srl: bool = False
    seed: int = 0
    lr: float = 1e-4
    clip: float | None = 5.0
    shared_optimizer: bool = True

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if not self.tasks:
            raise ValueError("schedule needs at least one task")
        for t in self.tasks:
            if t not in TASKS:
                raise ValueError(f"unknown task {t!r}")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")

    def task_at(self, iteration: int) -> str:
        return self.tasks[iteration % len(self.tasks)]


@dataclass
class TraceRow:
    iteration: int
    task: str
    loss: float


@dataclass
class TrainerState:
    """Everything needed to continue a run exactly where it stopped."""
    iteration: int
    optimizers: dict[str, AdamState]
    positions: dict[str, int]


@dataclass
class FinetuneResult:
    model: EncoderModel
    heads: dict[str, TaskHead]
    trace: list[TraceRow]
    state: TrainerState


def trainable_parameters(srl: EncoderModel, heads: Mapping[str, TaskHead],
                         include_srl: bool = True) -> dict[str, Tensor]:
    params = {}
    if include_srl:
        params.update({f"srl/{k}": v for k, v in srl.params.items()})
    for task, head in heads.items():
        params.update({f"head/{task}/{k}": v for k, v in head.params().items()})
    return params


def multitask_finetune(srl: EncoderModel, heads: Mapping[str, TaskHead], data: Mapping[str, LabeledSet],
                       sched: TrainSchedule, state: TrainerState | None = None,
                       checkpoint_every: int = 0,
                       on_checkpoint: Callable[[TrainerState, list[TraceRow]], None] | None = None) -> FinetuneResult:
    """Alternate tasks round-robin: iteration ``i`` trains ``sched.tasks[i % n]``.

    With ``freeze_srl`` the encoder runs without a graph and only the heads
    receive updates.  Pass the ``state`` from an earlier (interrupted) run to
    continue it; ``on_checkpoint`` is called every ``checkpoint_every``
    iterations with the state after that iteration and the trace so far.
    """
    for task in sched.tasks:
        if task not in heads:
            raise ValueError(f"no head for task {task!r}")
        if task not in data or len(data[task]) == 0:
            raise ValueError(f"empty dataset for task {task!r}")
        if heads[task].task != task:
            raise ValueError(f"head registered under {task!r} is a {heads[task].task!r} head")

    active = {t: heads[t] for t in dict.fromkeys(sched.tasks)}
    params = trainable_parameters(srl, active, include_srl=not sched.freeze_srl)
    if state is None:
        keys = ["shared"] if sched.shared_optimizer else list(active)
        state = TrainerState(0, {k: AdamState(lr=sched.lr) for k in keys}, {t: 0 for t in active})
    streams = {t: BatchStream(len(data[t]), sched.batch_size, derive_seed(sched.seed, f"stream/{t}"),
                              position=state.positions[t]) for t in active}

    was_frozen = srl.frozen
    srl.frozen = sched.freeze_srl
    trace: list[TraceRow] = []
    try:
        for it in range(state.iteration, sched.max_iterations):
            task = sched.task_at(it)
            head = active[task]
            idx = streams[task].next()
            waves, labels = data[task].waves[idx], data[task].labels[idx]
            for p in params.values():
                p.grad = None
            if sched.freeze_srl:
                with no_grad():
                    h = srl(waves)
                h = Tensor(h.data, dtype=h.dtype)
            else:
                h = srl(waves)
            loss = task_loss(h, labels, head)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(it)
            loss.backward()
            grads = collect_grads(params)
            if sched.clip:
                clip_grad_norm(grads, sched.clip)
            opt = state.optimizers["shared" if "shared" in state.optimizers else task]
            try:
                adam_step(params, grads, opt)
            except NonFiniteError as exc:
                raise DivergenceError(it, str(exc)) from exc
            trace.append(TraceRow(it, task, value))
            state.iteration = it + 1
            state.positions = {t: s.position for t, s in streams.items()}
            if it % 100 == 0:
                log.info("iteration %d task %s loss %.4f", it, task, value)
            if checkpoint_every and on_checkpoint and state.iteration % checkpoint_every == 0:
                on_checkpoint(state, trace)
    finally:
        srl.frozen = was_frozen
    return FinetuneResult(srl, dict(heads), trace, state)


def singletask_finetune(srl: EncoderModel, heads: Mapping[str, TaskHead], data: Mapping[str, LabeledSet],
                        sched: TrainSchedule, **kwargs) -> FinetuneResult:
    if len(sched.tasks) != 1:
        raise ValueError("single-task fine-tuning takes exactly one task")
    return multitask_finetune(srl, heads, data, sched, **kwargs)


def write_trace(path, trace: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "task", "loss"])
        for row in trace:
            w.writerow([row.iteration, row.task, repr(row.loss)])


def predict_keywords(srl: EncoderModel, head: TaskHead, waves: np.ndarray, batch_size: int = 64) -> np.ndarray:
    if head.task != KWS:
        raise ValueError("predict_keywords needs a keyword head")
    out = []
    with no_grad():
        for i in range(0, len(waves), batch_size):
            out.append(kws_logits(srl(waves[i:i + batch_size]), head).data.argmax(axis=-1))
    return np.concatenate(out)


def pooled_embeddings(srl: EncoderModel, waves: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Mean-pooled final hidden states, one row per utterance."""
    out = []
    with no_grad():
        for i in range(0, len(waves), batch_size):
            h = srl(waves[i:i + batch_size]).data
            out.append(h.mean(axis=1, dtype=np.float64))
    return np.concatenate(out)


def speaker_vectors(srl: EncoderModel, head: TaskHead, waves: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Cosines of each pooled utterance embedding against every speaker-head column.

    This is the speaker-specific representation used for trial scoring: it
    keeps only the directions the speaker head has learned to separate.
    """
    if head.task != SV:
        raise ValueError("speaker_vectors needs a speaker head")
    out = []
    with no_grad():
        for i in range(0, len(waves), batch_size):
            out.append(sv_cosines(srl(waves[i:i + batch_size]), head).data.astype(np.float64))
    return np.concatenate(out)
