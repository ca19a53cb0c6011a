"""Downstream heads: keyword classification and speaker classification.

Both heads mean-pool the encoder output over time.  The keyword head is a
plain affine map trained with cross-entropy.  The speaker head has no bias;
its columns act as speaker centres and the loss is an additive-margin
softmax over cosines between the pooled embedding and those centres.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype

KWS = "kws"
SV = "sv"
TASKS = (KWS, SV)


@dataclass
class TaskHead:
    task: str
    weight: Tensor  # model_dim x out_dim
    bias: Tensor | None = None
    margin: float = 0.2
    scale: float = 30.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.out_dim < 2:
            raise ValueError("a head needs at least two output classes")
        if self.task == KWS and self.bias is None:
            raise ValueError("keyword head needs a bias")
        if self.task == SV and self.bias is not None:
            raise ValueError("speaker head has no bias")
        if self.margin < 0 or self.scale <= 0:
            raise ValueError("margin must be >= 0 and scale > 0")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def params(self) -> dict[str, Tensor]:
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p


def build_head(task: str, model_dim: int, out_dim: int, seed: int, margin: float = 0.2,
               scale: float = 30.0, dtype=None) -> TaskHead:
    dtype = np.dtype(dtype or default_dtype())
    rng = np.random.default_rng(seed)
    w = Tensor((rng.standard_normal((model_dim, out_dim)) / np.sqrt(model_dim)).astype(dtype),
               requires_grad=True, dtype=dtype)
    b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True, dtype=dtype) if task == KWS else None
    return TaskHead(task, w, b, margin=margin, scale=scale)


def _pool(hidden: Tensor) -> Tensor:
    # T x D -> 1 x D so single utterances and batches share one code path
    if hidden.ndim == 2:
        hidden = ops.reshape(hidden, (1,) + hidden.shape)
    return ops.mean_pool_time(hidden)


def _labels(labels, n: int, out_dim: int) -> np.ndarray:
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lab.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {lab.shape}")
    if (lab < 0).any() or (lab >= out_dim).any():
        raise ValueError(f"label out of range [0, {out_dim})")
    return lab


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Batch-mean of ``-log softmax(logits)[label]``."""
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = ops.sum(ops.log_softmax(logits) * onehot)
    return ops.scale(picked, -1.0 / len(labels))


def kws_logits(hidden: Tensor, head: TaskHead) -> Tensor:
    return ops.linear(_pool(hidden), head.weight, head.bias)


def sv_cosines(hidden: Tensor, head: TaskHead) -> Tensor:
    e = ops.l2_normalize(_pool(hidden))
    w = ops.transpose(ops.l2_normalize(ops.transpose(head.weight)))
    return ops.matmul(e, w)


def sv_logits(hidden: Tensor, head: TaskHead, speakers=None) -> Tensor:
    """``s * (cos - m * [c == speaker])``; the margin needs the true speakers."""
    cos = sv_cosines(hidden, head)
    if speakers is None or head.margin == 0.0:
        return ops.scale(cos, head.scale)
    lab = _labels(speakers, cos.shape[0], head.out_dim)
    margin = np.zeros(cos.shape, dtype=cos.dtype)
    margin[np.arange(len(lab)), lab] = head.margin
    return ops.scale(cos - margin, head.scale)


def kws_loss(hidden: Tensor, label, head: TaskHead) -> Tensor:
    if head.task != KWS:
        raise ValueError("kws_loss needs a keyword head")
    logits = kws_logits(hidden, head)
    return cross_entropy(logits, _labels(label, logits.shape[0], head.out_dim))


def angular_softmax_loss(hidden: Tensor, speaker, head: TaskHead) -> Tensor:
    if head.task != SV:
        raise ValueError("angular_softmax_loss needs a speaker head")
    logits = sv_logits(hidden, head, speaker)
    return cross_entropy(logits, _labels(speaker, logits.shape[0], head.out_dim))


def task_loss(hidden: Tensor, labels, head: TaskHead) -> Tensor:
    return kws_loss(hidden, labels, head) if head.task == KWS else angular_softmax_loss(hidden, labels, head)


@dataclass
class SVEmbedding:
    vector: np.ndarray
    utterance_id: str = ""
    extra: dict = field(default_factory=dict)


def extract_embedding(hidden: Tensor, utterance_id: str = "") -> SVEmbedding:
    """Mean over time of a ``T x D`` hidden state (stored unnormalized)."""
    if hidden.ndim != 2 or hidden.shape[0] < 1:
        raise ValueError(f"expected T x D hidden state, got {hidden.shape}")
    return SVEmbedding(hidden.data.mean(axis=0, dtype=np.float64).astype(hidden.dtype), utterance_id)
