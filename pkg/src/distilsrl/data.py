"""Synthetic keyword/speaker corpus and the on-disk manifest format.

Each utterance is the sum of

* a keyword template: two sinusoids whose frequencies are a keyword-specific
  pair drawn from a low band grid,
* a speaker signature: two sinusoids from a disjoint high band grid with
  speaker-specific relative amplitudes (a crude spectral envelope),
* white Gaussian noise of standard deviation ``noise``.

Phases are fixed per (keyword, speaker) so that with ``noise = 0`` all
utterances of one pair are identical.  Waveforms are stored as raw
little-endian float32, one file per utterance.
"""
from __future__ import annotations

import itertools
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import derive_seed

MANIFEST_HEADER = "#srl-manifest v1 rate={rate}"
SPLITS = ("train", "test")

# frequencies in cycles/sample; keyword and speaker bands do not overlap
KEYWORD_BAND = (0.03, 0.06, 0.09, 0.12, 0.15, 0.18, 0.21)
SPEAKER_BAND = (0.29, 0.33, 0.37, 0.41, 0.45)


@dataclass(frozen=True)
class SynthSpec:
    num_keywords: int = 12
    num_speakers: int = 8
    train_per_pair: int = 8
    test_per_pair: int = 3
    sample_length: int = 640
    rate: int = 16000
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.num_keywords, self.num_speakers, self.train_per_pair, self.test_per_pair,
               self.sample_length, self.rate) < 1:
            raise ValueError("all SynthSpec counts must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.num_keywords > len(keyword_table()):
            raise ValueError(f"at most {len(keyword_table())} keywords available")
        if self.num_speakers > len(speaker_table()):
            raise ValueError(f"at most {len(speaker_table())} speakers available")


def keyword_table() -> list[tuple[float, float]]:
    """Frequency pair for each keyword index."""
    return list(itertools.combinations(KEYWORD_BAND, 2))


def speaker_table() -> list[tuple[float, float, float]]:
    """(f1, f2, amplitude ratio) per speaker: frequency pair plus envelope tilt."""
    pairs = list(itertools.combinations(SPEAKER_BAND, 2))
    return [(f1, f2, (0.5, 1.0)[i % 2]) for i, (f1, f2) in enumerate(pairs)]


@dataclass(frozen=True)
class Utterance:
    path: str
    keyword: int
    speaker: int
    split: str


@dataclass
class Manifest:
    rate: int
    entries: list[Utterance]

    def validate(self, num_keywords: int | None = None, num_speakers: int | None = None) -> None:
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths are not unique")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"{e.path}: unknown split {e.split!r}")
            if e.keyword < 0 or (num_keywords is not None and e.keyword >= num_keywords):
                raise ValueError(f"{e.path}: keyword label {e.keyword} out of range")
            if e.speaker < 0 or (num_speakers is not None and e.speaker >= num_speakers):
                raise ValueError(f"{e.path}: speaker label {e.speaker} out of range")
        for split in SPLITS:
            if not any(e.split == split for e in self.entries):
                raise ValueError(f"manifest has no {split} entries")

    def split(self, name: str) -> list[Utterance]:
        return [e for e in self.entries if e.split == name]


def _template(spec: SynthSpec, keyword: int, speaker: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(spec.seed, f"phase/{keyword}/{speaker}"))
    n = np.arange(spec.sample_length, dtype=np.float64)
    fk = keyword_table()[keyword]
    f1, f2, ratio = speaker_table()[speaker]
    phases = rng.uniform(0, 2 * np.pi, size=4)
    wave = np.sin(2 * np.pi * fk[0] * n + phases[0]) + np.sin(2 * np.pi * fk[1] * n + phases[1])
    wave += 0.8 * np.sin(2 * np.pi * f1 * n + phases[2]) + 0.8 * ratio * np.sin(2 * np.pi * f2 * n + phases[3])
    return wave


def synthesize(spec: SynthSpec) -> tuple[np.ndarray, Manifest]:
    """In-memory corpus: ``N x sample_length`` float32 waves and their manifest."""
    waves, entries = [], []
    for k in range(spec.num_keywords):
        for s in range(spec.num_speakers):
            base = _template(spec, k, s)
            for u in range(spec.train_per_pair + spec.test_per_pair):
                rng = np.random.default_rng(derive_seed(spec.seed, f"noise/{k}/{s}/{u}"))
                w = base + spec.noise * rng.standard_normal(spec.sample_length)
                split = "train" if u < spec.train_per_pair else "test"
                waves.append(w.astype("<f4"))
                entries.append(Utterance(f"{split}/kw{k:02d}_spk{s:02d}_{u:03d}.f32", k, s, split))
    return np.stack(waves), Manifest(spec.rate, entries)


def write_manifest(path, manifest: Manifest) -> None:
    with open(path, "w") as fh:
        fh.write(MANIFEST_HEADER.format(rate=manifest.rate) + "\n")
        for e in manifest.entries:
            fh.write(f"{e.path}\t{e.keyword}\t{e.speaker}\t{e.split}\n")


def read_manifest(path) -> Manifest:
    with open(path) as fh:
        header = fh.readline().strip()
        prefix = "#srl-manifest v1 rate="
        if not header.startswith(prefix):
            raise ValueError(f"{path}: not an srl manifest (header {header!r})")
        rate = int(header[len(prefix):])
        entries = []
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated columns")
            entries.append(Utterance(cols[0], int(cols[1]), int(cols[2]), cols[3]))
    m = Manifest(rate, entries)
    m.validate()
    return m


def generate_synthetic(spec: SynthSpec, out_dir) -> Manifest:
    """Write the corpus under ``out_dir`` (``manifest.tsv`` plus one file per utterance)."""
    out = Path(out_dir)
    waves, manifest = synthesize(spec)
    try:
        for split in SPLITS:
            (out / split).mkdir(parents=True, exist_ok=True)
        for w, e in zip(waves, manifest.entries):
            (out / e.path).write_bytes(w.astype("<f4").tobytes())
        write_manifest(out / "manifest.tsv", manifest)
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out}: {exc}") from exc
    return manifest


def read_wave(path) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").astype(np.float32)


@dataclass
class Corpus:
    """Waves and labels of one split, in manifest order."""
    waves: np.ndarray
    keywords: np.ndarray
    speakers: np.ndarray
    ids: list[str]


def load_split(manifest_path, split: str) -> Corpus:
    manifest_path = Path(manifest_path)
    m = read_manifest(manifest_path)
    root = manifest_path.parent
    entries = m.split(split)
    waves = [read_wave(root / e.path) for e in entries]
    if len({len(w) for w in waves}) > 1:
        raise ValueError("variable-length utterances are not supported")
    return Corpus(np.stack(waves), np.array([e.keyword for e in entries]),
                  np.array([e.speaker for e in entries]), [e.path for e in entries])


def corpus_from_memory(waves: np.ndarray, manifest: Manifest, split: str) -> Corpus:
    idx = [i for i, e in enumerate(manifest.entries) if e.split == split]
    entries = [manifest.entries[i] for i in idx]
    return Corpus(waves[idx], np.array([e.keyword for e in entries]),
                  np.array([e.speaker for e in entries]), [e.path for e in entries])


def corpus_files(out_dir) -> list[str]:
    """Relative paths of every ``.f32`` file under ``out_dir``."""
    root = Path(out_dir)
    return sorted(os.path.relpath(p, root) for p in root.rglob("*.f32"))
