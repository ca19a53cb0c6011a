"""End-to-end experiment stages driven by a :class:`~distilsrl.config.Config`.

Each stage is a plain function so scripts, tests and the command line share
one code path.  All randomness is derived from ``cfg["seed"]`` through
:func:`~distilsrl.seeding.derive_seed`, with one label per stream.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import PRESETS, Config, parse_config
from .data import Corpus, SynthSpec, corpus_from_memory, synthesize
from .distill import DistillResult, init_student_from_teacher, make_plan, run_distillation
from .heads import KWS, SV, TaskHead, build_head
from .metrics import MetricReport, TrialSet, accuracy, build_trials, compute_eer, cosine_scores
from .model import EncoderModel, build_model, count_parameters
from .seeding import derive_seed
from .tensor import Tensor
from .trainer import (FinetuneResult, LabeledSet, TrainerState, TrainSchedule, multitask_finetune,
                      predict_keywords, speaker_vectors)

# Downstream label spaces of the reference-size models: 12 keyword classes
# and the 1211 development speakers of the speaker-verification corpus.
REFERENCE_KWS_CLASSES = 12
REFERENCE_SV_SPEAKERS = 1211

TASK_SETS = {"kws": (KWS,), "sv": (SV,), "multi": (KWS, SV)}


def synth_spec(cfg: Config) -> SynthSpec:
    return SynthSpec(num_keywords=cfg["data.keywords"], num_speakers=cfg["data.speakers"],
                     train_per_pair=cfg["data.train_per_pair"], test_per_pair=cfg["data.test_per_pair"],
                     sample_length=cfg["data.sample_length"], rate=cfg["data.rate"],
                     noise=cfg["data.noise"], seed=derive_seed(cfg["seed"], "data"))


def synthetic_splits(cfg: Config) -> tuple[Corpus, Corpus]:
    waves, manifest = synthesize(synth_spec(cfg))
    return corpus_from_memory(waves, manifest, "train"), corpus_from_memory(waves, manifest, "test")


def labeled(corpus: Corpus) -> dict[str, LabeledSet]:
    return {KWS: LabeledSet(corpus.waves, corpus.keywords), SV: LabeledSet(corpus.waves, corpus.speakers)}


def new_heads(cfg: Config, model_dim: int, tasks: Sequence[str], label: str) -> dict[str, TaskHead]:
    out_dims = {KWS: cfg["kws.classes"], SV: cfg["data.speakers"]}
    return {t: build_head(t, model_dim, out_dims[t], derive_seed(cfg["seed"], f"{label}/head/{t}"),
                          margin=cfg["sv.margin"], scale=cfg["sv.scale"]) for t in tasks}


def clone_model(m: EncoderModel) -> EncoderModel:
    params = {k: Tensor(v.data.copy(), requires_grad=True, dtype=v.dtype) for k, v in m.params.items()}
    return EncoderModel(m.config, params)


def train_teacher(cfg: Config, train: Corpus) -> FinetuneResult:
    """Stand-in for a pre-trained teacher: train the deep encoder on both tasks."""
    teacher = build_model(cfg.model_config(cfg["teacher.layers"]), derive_seed(cfg["seed"], "teacher/init"))
    heads = new_heads(cfg, cfg["model.dim"], (KWS, SV), "teacher")
    sched = TrainSchedule((KWS, SV), cfg["teacher.iterations"], batch_size=cfg["train.batch_size"],
                          seed=derive_seed(cfg["seed"], "teacher/schedule"), lr=cfg["teacher.lr"],
                          clip=cfg["train.clip"], shared_optimizer=cfg["train.shared_optimizer"])
    return multitask_finetune(teacher, heads, labeled(train), sched)


def distill_student(cfg: Config, teacher: EncoderModel, waves: np.ndarray) -> DistillResult:
    student = init_student_from_teacher(teacher, cfg.model_config(cfg["student.layers"]))
    plan = make_plan(cfg["distill.layers"], student.config.model_dim, teacher.config.model_dim,
                     derive_seed(cfg["seed"], "distill/plan"), init=cfg["distill.head_init"])
    return run_distillation(teacher, student, plan, waves, cfg["distill.steps"],
                            seed=derive_seed(cfg["seed"], "distill/stream"),
                            batch_size=cfg["distill.batch_size"], lr=cfg["distill.lr"], clip=cfg["train.clip"])


def finetune_schedule(cfg: Config, tasks: Sequence[str], freeze: bool) -> TrainSchedule:
    return TrainSchedule(tuple(tasks), cfg["train.iterations"], batch_size=cfg["train.batch_size"],
                         freeze_srl=freeze, seed=derive_seed(cfg["seed"], "finetune/schedule"),
                         lr=cfg["train.lr"], clip=cfg["train.clip"], shared_optimizer=cfg["train.shared_optimizer"])


def finetune(cfg: Config, student: EncoderModel, train: Corpus, tasks: Sequence[str], freeze: bool = False,
             heads: dict[str, TaskHead] | None = None, state: TrainerState | None = None,
             on_checkpoint: Callable[[TrainerState, list], None] | None = None) -> FinetuneResult:
    """Fine-tune ``student`` in place.  Heads are seeded per task, so runs that
    differ only in ``freeze`` or in the task set start from identical heads."""
    if heads is None:
        heads = new_heads(cfg, student.config.model_dim, tasks, "finetune")
    return multitask_finetune(student, heads, labeled(train), finetune_schedule(cfg, tasks, freeze),
                              state=state, checkpoint_every=cfg["train.checkpoint_every"],
                              on_checkpoint=on_checkpoint)


@dataclass
class Evaluation:
    reports: list[MetricReport]
    trials: TrialSet | None = None

    def value(self, task: str) -> float:
        for r in self.reports:
            if r.task == task:
                return r.value
        raise KeyError(task)


def evaluate(cfg: Config, model: EncoderModel, heads: dict[str, TaskHead], test: Corpus) -> Evaluation:
    """Keyword accuracy for a keyword head, trial EER for a speaker head."""
    out = Evaluation([])
    if KWS in heads:
        pred = predict_keywords(model, heads[KWS], test.waves)
        out.reports.append(MetricReport(KWS, "accuracy", accuracy(pred, test.keywords), len(pred)))
    if SV in heads:
        pairs = build_trials(test.speakers, derive_seed(cfg["seed"], "eval/trials"))
        scores = cosine_scores(speaker_vectors(model, heads[SV], test.waves), pairs[:, :2])
        trials = TrialSet([(test.ids[a], test.ids[b], bool(s)) for a, b, s in pairs], scores)
        out.reports.append(MetricReport(SV, "eer", compute_eer(trials), len(trials)))
        out.trials = trials
    return out


def parameter_counts(cfg: Config, kws_classes: int, sv_speakers: int) -> dict[str, int | float]:
    """Teacher and student sizes for ``cfg``, downstream heads included.

    The student carries one prediction head (linear, model_dim to teacher
    dim) per distilled teacher layer on top of its shallow encoder.
    """
    teacher_cfg = cfg.model_config(cfg["teacher.layers"])
    d = teacher_cfg.model_dim
    heads = (d * kws_classes + kws_classes) + d * sv_speakers
    teacher_encoder = count_parameters(teacher_cfg)
    student_encoder = count_parameters(teacher_cfg.with_layers(cfg["student.layers"]))
    prediction = len(cfg["distill.layers"]) * (d * d + d)
    teacher = teacher_encoder + heads
    student = student_encoder + prediction + heads
    return {"teacher_encoder": teacher_encoder, "student_encoder": student_encoder,
            "prediction_heads": prediction, "task_heads": heads,
            "teacher": teacher, "student": student, "ratio": student / teacher}


def reference_parameter_counts() -> dict[str, int | float]:
    """:func:`parameter_counts` for the BASE-size teacher and its two-layer student."""
    return parameter_counts(parse_config(PRESETS["base-reference"]), REFERENCE_KWS_CLASSES, REFERENCE_SV_SPEAKERS)
