import hashlib

import numpy as np
import pytest

from distilsrl.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint
from distilsrl.config import ConfigFileError, default_config, load_config, parse_config, resolve_config
from distilsrl.data import (KEYWORD_BAND, Manifest, SynthSpec, Utterance, corpus_files, generate_synthetic,
                            keyword_table, load_split, read_manifest, synthesize, write_manifest)
from distilsrl.distill import make_plan
from distilsrl.heads import KWS, SV, build_head
from distilsrl.model import build_model, toy_config
from distilsrl.trainer import AdamState, TrainerState

SMALL = SynthSpec(num_keywords=5, num_speakers=3, train_per_pair=2, test_per_pair=1, seed=4)


def band_energy(wave, freq):
    n = np.arange(len(wave))
    return abs(np.sum(wave * np.exp(-2j * np.pi * freq * n)))


def peak_keyword(wave):
    """Pick the two strongest keyword-band tones and look the pair up."""
    energies = [band_energy(wave, f) for f in KEYWORD_BAND]
    top = sorted(np.argsort(energies)[-2:])
    return keyword_table().index((KEYWORD_BAND[top[0]], KEYWORD_BAND[top[1]]))


def tree_digest(root):
    h = hashlib.sha256()
    for rel in sorted(p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file()):
        h.update(rel.encode() + (root / rel).read_bytes())
    return h.hexdigest()


class TestGenerator:
    def test_byte_identical_corpus(self, tmp_path):
        generate_synthetic(SMALL, tmp_path / "a")
        generate_synthetic(SMALL, tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_seed_changes_corpus(self):
        a, _ = synthesize(SMALL)
        b, _ = synthesize(SynthSpec(**{**SMALL.__dict__, "seed": 5}))
        assert not np.array_equal(a, b)

    def test_noise_free_pairs_identical(self):
        waves, manifest = synthesize(SynthSpec(**{**SMALL.__dict__, "noise": 0.0}))
        by_pair = {}
        for w, e in zip(waves, manifest.entries):
            by_pair.setdefault((e.keyword, e.speaker), []).append(w)
        for group in by_pair.values():
            assert all(np.array_equal(group[0], w) for w in group[1:])

    def test_spectral_peak_recovers_keyword(self):
        spec = SynthSpec(num_keywords=12, num_speakers=8, train_per_pair=1, test_per_pair=1, noise=0.0)
        waves, manifest = synthesize(spec)
        hits = [peak_keyword(w) == e.keyword for w, e in zip(waves, manifest.entries)]
        assert all(hits)

    def test_labels_and_splits(self):
        waves, manifest = synthesize(SMALL)
        assert waves.shape == (5 * 3 * 3, 640)
        assert waves.dtype == np.float32
        assert len(manifest.split("train")) == 30
        assert len(manifest.split("test")) == 15
        manifest.validate(5, 3)

    @pytest.mark.parametrize("field,value", [("num_keywords", 0), ("noise", -1.0), ("num_keywords", 99)])
    def test_invalid_spec(self, field, value):
        with pytest.raises(ValueError):
            SynthSpec(**{field: value})

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            generate_synthetic(SMALL, blocker / "sub")


class TestManifest:
    def test_closure(self, tmp_path):
        manifest = generate_synthetic(SMALL, tmp_path)
        referenced = {e.path for e in manifest.entries}
        assert set(corpus_files(tmp_path)) == referenced
        assert all((tmp_path / p).exists() for p in referenced)

    def test_header_and_round_trip(self, tmp_path):
        manifest = generate_synthetic(SMALL, tmp_path)
        text = (tmp_path / "manifest.tsv").read_text().splitlines()
        assert text[0] == "#srl-manifest v1 rate=16000"
        assert text[1].split("\t") == ["train/kw00_spk00_000.f32", "0", "0", "train"]
        assert read_manifest(tmp_path / "manifest.tsv") == manifest

    def test_load_split_matches_memory(self, tmp_path):
        generate_synthetic(SMALL, tmp_path)
        waves, manifest = synthesize(SMALL)
        test = load_split(tmp_path / "manifest.tsv", "test")
        idx = [i for i, e in enumerate(manifest.entries) if e.split == "test"]
        assert np.array_equal(test.waves, waves[idx])
        assert list(test.keywords) == [manifest.entries[i].keyword for i in idx]

    def test_duplicate_paths(self):
        e = Utterance("a.f32", 0, 0, "train")
        with pytest.raises(ValueError, match="unique"):
            Manifest(16000, [e, e, Utterance("b.f32", 0, 0, "test")]).validate()

    def test_missing_split(self):
        with pytest.raises(ValueError, match="test"):
            Manifest(16000, [Utterance("a.f32", 0, 0, "train")]).validate()

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.tsv").write_text("path\tkw\tspk\tsplit\n")
        with pytest.raises(ValueError, match="header"):
            read_manifest(tmp_path / "m.tsv")

    def test_write_read(self, tmp_path):
        m = Manifest(8000, [Utterance("a.f32", 1, 2, "train"), Utterance("b.f32", 0, 1, "test")])
        write_manifest(tmp_path / "m.tsv", m)
        assert read_manifest(tmp_path / "m.tsv") == m


class TestCheckpoint:
    @pytest.fixture
    def parts(self):
        model = build_model(toy_config(2), 3)
        heads = {KWS: build_head(KWS, 64, 12, 1), SV: build_head(SV, 64, 8, 2)}
        return model, heads

    def test_round_trip_bit_exact(self, parts, tmp_path):
        model, heads = parts
        save_checkpoint(tmp_path / "c.ckpt", model, heads)
        back = load_checkpoint(tmp_path / "c.ckpt")
        assert list(back.model.params) == list(model.params)
        for k, v in model.params.items():
            assert np.array_equal(back.model[k].data, v.data) and back.model[k].dtype == v.dtype
        for t in (KWS, SV):
            for k, v in heads[t].params().items():
                assert np.array_equal(back.heads[t].params()[k].data, v.data)

    def test_float64_round_trip(self, tmp_path):
        model = build_model(toy_config(1), 3, dtype=np.float64)
        save_checkpoint(tmp_path / "c.ckpt", model)
        back = load_checkpoint(tmp_path / "c.ckpt")
        assert all(np.array_equal(back.model[k].data, v.data) and back.model[k].dtype == np.float64
                   for k, v in model.params.items())

    def test_plan_and_state_round_trip(self, parts, tmp_path, rng):
        model, heads = parts
        plan = make_plan((1, 2), 64, 64, seed=0)
        opt = AdamState(lr=3e-4, t=5, m={"srl/proj.bias": rng.standard_normal(64)},
                        v={"srl/proj.bias": rng.random(64)}, steps={"srl/proj.bias": 5})
        state = TrainerState(7, {"shared": opt}, {KWS: 64, SV: 48})
        save_checkpoint(tmp_path / "c.ckpt", model, heads, plan=plan, trainer_state=state)
        back = load_checkpoint(tmp_path / "c.ckpt")
        assert back.plan.teacher_layers == (1, 2)
        assert np.array_equal(back.plan.heads[2][0].data, plan.heads[2][0].data)
        st = back.trainer_state
        assert (st.iteration, st.positions) == (7, {KWS: 64, SV: 48})
        o = st.optimizers["shared"]
        assert (o.lr, o.t, o.steps) == (3e-4, 5, {"srl/proj.bias": 5})
        assert np.array_equal(o.m["srl/proj.bias"], opt.m["srl/proj.bias"])

    def test_truncated(self, parts, tmp_path):
        model, heads = parts
        save_checkpoint(tmp_path / "c.ckpt", model, heads)
        blob = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError, match="digest"):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_flipped_byte(self, parts, tmp_path):
        model, _ = parts
        save_checkpoint(tmp_path / "c.ckpt", model)
        blob = bytearray((tmp_path / "c.ckpt").read_bytes())
        blob[100] ^= 1
        (tmp_path / "c.ckpt").write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="digest"):
            read_checkpoint(tmp_path / "c.ckpt")

    def test_version_mismatch(self, tmp_path):
        write_checkpoint(tmp_path / "c.ckpt", "", {})
        blob = bytearray((tmp_path / "c.ckpt").read_bytes()[:-32])
        blob[4] = 9
        body = bytes(blob)
        (tmp_path / "c.ckpt").write_bytes(body + hashlib.sha256(body).digest())
        with pytest.raises(CheckpointError, match="version"):
            read_checkpoint(tmp_path / "c.ckpt")

    def test_unknown_tensor_name(self, tmp_path):
        with pytest.raises(CheckpointError, match="namespace"):
            write_checkpoint(tmp_path / "c.ckpt", "", {"misc/x": np.zeros(2)})

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"PK\x03\x04" + bytes(64))
        with pytest.raises(CheckpointError, match="magic"):
            read_checkpoint(tmp_path / "c.ckpt")

    def test_layout(self, tmp_path):
        write_checkpoint(tmp_path / "c.ckpt", "seed = 1\n", {"srl/x": np.arange(3, dtype=np.float32)})
        blob = (tmp_path / "c.ckpt").read_bytes()
        assert blob[:4] == b"SRLD"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 9
        assert blob[12:21] == b"seed = 1\n"
        assert hashlib.sha256(blob[:-32]).digest() == blob[-32:]

    def test_config_echo_verbatim(self, parts, tmp_path):
        text = "# experiment\nseed = 3\ntrain.lr = 2e-4   # slower\n\nsv.margin = 0.3\n"
        parse_config(text)
        model, heads = parts
        save_checkpoint(tmp_path / "c.ckpt", model, heads, config_text=text)
        back = load_checkpoint(tmp_path / "c.ckpt")
        assert back.config_text == text
        assert back.heads[SV].margin == 0.3


class TestConfig:
    def test_empty_is_defaults(self, tmp_path):
        (tmp_path / "c.cfg").write_text("")
        cfg = load_config(tmp_path / "c.cfg")
        assert cfg.values == default_config().values
        assert cfg["train.lr"] == 1e-4 and cfg["sv.margin"] == 0.2 and cfg["kws.classes"] == 12

    def test_negative_margin_names_key(self):
        with pytest.raises(ConfigFileError, match="sv.margin"):
            parse_config("sv.margin = -1\n")

    def test_parse_error_has_line_number(self):
        with pytest.raises(ConfigFileError, match=":3:"):
            parse_config("seed = 1\n\nthis is not a setting\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigFileError, match="unknown key"):
            parse_config("model.depth = 3\n")

    def test_bad_value_type(self):
        with pytest.raises(ConfigFileError, match="train.iterations"):
            parse_config("train.iterations = many\n")

    def test_override_wins(self):
        cfg = parse_config("seed = 1\n", overrides={"seed": "9"})
        assert cfg["seed"] == 9

    def test_cross_checks(self):
        with pytest.raises(ConfigFileError, match="distill.layers"):
            parse_config("distill.layers = 2,5\n")
        with pytest.raises(ConfigFileError, match="student.layers"):
            parse_config("student.layers = 6\n")

    def test_resolved_text_reparses(self):
        cfg = parse_config("model.conv = 16:8:4,16:3:2\ntrain.shared_optimizer = no\n")
        again = parse_config(cfg.resolved_text())
        assert again.values == cfg.values

    def test_base_reference_preset(self):
        cfg = resolve_config("base-reference")
        assert cfg["model.dim"] == 768 and cfg["teacher.layers"] == 12
        assert cfg.model_config(12).receptive_field() == 400
