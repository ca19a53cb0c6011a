"""Keyword accuracy and speaker-verification equal error rate."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class TrialSet:
    """Verification trials ``(id_a, id_b, same_speaker)`` with optional scores."""
    trials: list[tuple[str, str, bool]]
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.trials = [(str(a), str(b), bool(s)) for a, b, s in self.trials]
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64)
            if self.scores.shape != (len(self.trials),):
                raise ValueError("one score per trial")
            if not np.isfinite(self.scores).all():
                raise ValueError("scores must be finite")

    @property
    def labels(self) -> np.ndarray:
        return np.array([s for _, _, s in self.trials], dtype=bool)

    def __len__(self) -> int:
        return len(self.trials)


@dataclass
class MetricReport:
    task: str
    metric: str
    value: float
    n: int

    def __post_init__(self):
        if not 0.0 <= self.value <= 100.0:
            raise ValueError(f"{self.metric} {self.value} outside [0, 100]")


def accuracy(predictions, labels) -> float:
    pred, lab = np.asarray(predictions), np.asarray(labels)
    if pred.shape != lab.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {lab.shape}")
    if pred.size == 0:
        raise ValueError("accuracy of an empty set")
    return 100.0 * float(np.count_nonzero(pred == lab)) / pred.size


def error_rates(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """FAR and FRR at thresholds = each distinct score (ascending), then +inf.

    A trial is accepted when ``score >= threshold``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_tar, n_imp = int(labels.sum()), int((~labels).sum())
    if n_tar == 0 or n_imp == 0:
        raise ValueError("EER needs at least one target and one impostor trial")
    order = np.argsort(scores, kind="stable")
    s, lab = scores[order], labels[order]
    # first index of each run of equal scores
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    tar_below = np.r_[0, np.cumsum(lab)]  # targets strictly below position i
    imp_below = np.r_[0, np.cumsum(~lab)]
    cut = np.r_[starts, len(s)]
    frr = tar_below[cut] / n_tar
    far = (n_imp - imp_below[cut]) / n_imp
    return far, frr


def eer_from_rates(far: np.ndarray, frr: np.ndarray) -> float:
    """Crossing of FAR and FRR, linear in (FAR, FRR) between bracketing points."""
    diff = far - frr
    j = int(np.flatnonzero(diff <= 0)[0])  # diff ends at -1 so this exists
    if diff[j] == 0 or j == 0:
        return float(far[j])
    lam = diff[j - 1] / (diff[j - 1] - diff[j])
    return float(far[j - 1] + lam * (far[j] - far[j - 1]))


def compute_eer(t: TrialSet | Sequence[float], labels=None) -> float:
    """Equal error rate in percent.

    Accepts a scored :class:`TrialSet`, or raw ``(scores, labels)``.
    """
    if isinstance(t, TrialSet):
        if t.scores is None:
            raise ValueError("trial set has no scores")
        scores, labels = t.scores, t.labels
    else:
        scores = t
    far, frr = error_rates(scores, labels)
    return 100.0 * eer_from_rates(far, frr)


def cosine_scores(emb: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    e = np.asarray(emb, dtype=np.float64)
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
    return np.einsum("ij,ij->i", e[pairs[:, 0]], e[pairs[:, 1]])


def build_trials(speakers: Sequence[int], seed: int) -> np.ndarray:
    """All same-speaker pairs plus an equal-sized seeded sample of cross-speaker pairs.

    Returns an ``n x 3`` int array of ``(index_a, index_b, same)``.
    """
    spk = np.asarray(speakers)
    n = len(spk)
    target = [(i, j) for i, j in itertools.combinations(range(n), 2) if spk[i] == spk[j]]
    impostor = np.array([(i, j) for i, j in itertools.combinations(range(n), 2) if spk[i] != spk[j]])
    if not target or len(impostor) == 0:
        raise ValueError("need at least two utterances of one speaker and two distinct speakers")
    rng = np.random.default_rng(seed)
    k = min(len(target), len(impostor))
    pick = np.sort(rng.choice(len(impostor), size=k, replace=False))
    rows = [(i, j, 1) for i, j in target] + [(i, j, 0) for i, j in impostor[pick]]
    return np.array(rows, dtype=np.int64)


# --------------------------------------------------------------------------- files

def write_trials(path, trials: TrialSet) -> None:
    """``idA<TAB>idB<TAB>{0|1}``, plus a score column when scores are present."""
    with open(path, "w") as fh:
        for k, (a, b, same) in enumerate(trials.trials):
            row = [a, b, "1" if same else "0"]
            if trials.scores is not None:
                row.append(repr(float(trials.scores[k])))
            fh.write("\t".join(row) + "\n")


def read_trials(path) -> TrialSet:
    trials, scores = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) not in (3, 4) or cols[2] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: malformed trial line")
            trials.append((cols[0], cols[1], cols[2] == "1"))
            if len(cols) == 4:
                scores.append(float(cols[3]))
    if scores and len(scores) != len(trials):
        raise ValueError(f"{path}: scores present on some lines only")
    return TrialSet(trials, np.array(scores) if scores else None)


def write_metric_report(path, reports: Sequence[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "metric", "value", "n"])
        for r in reports:
            w.writerow([r.task, r.metric, f"{r.value:.6f}", r.n])


def read_metric_report(path) -> list[MetricReport]:
    with open(path, newline="") as fh:
        return [MetricReport(row["task"], row["metric"], float(row["value"]), int(row["n"]))
                for row in csv.DictReader(fh)]
