"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Unknown keys, malformed lines and out-of-domain values are errors that name
the line or the key.  ``KEYS`` below is the complete schema with defaults.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .model import ModelConfig


class ConfigFileError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _convs(text: str) -> tuple[tuple[int, int, int], ...]:
    out = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 3:
            raise ValueError(f"conv layer must be channels:kernel:stride, got {item!r}")
        out.append(tuple(int(p) for p in parts))
    return tuple(out)


def _pair(text: str) -> tuple[int, int]:
    parts = text.split(":")
    if len(parts) != 2:
        raise ValueError(f"expected kernel:groups, got {text!r}")
    return int(parts[0]), int(parts[1])


def _positive(v) -> bool:
    return v > 0


def _nonneg(v) -> bool:
    return v >= 0


def _unit(v) -> bool:
    return 0.0 <= v < 1.0


def _choice(*options) -> Callable[[Any], bool]:
    return lambda v: v in options


# key: (parser, default text, domain check)
KEYS: dict[str, tuple[Callable[[str], Any], str, Callable[[Any], bool] | None]] = {
    "seed": (int, "0", _nonneg),
    "data.keywords": (int, "12", _positive),
    "data.speakers": (int, "8", _positive),
    "data.train_per_pair": (int, "8", _positive),
    "data.test_per_pair": (int, "3", _positive),
    "data.sample_length": (int, "640", _positive),
    "data.rate": (int, "16000", _positive),
    "data.noise": (float, "0.5", _nonneg),
    "model.conv": (_convs, "32:10:5,32:3:2", None),
    "model.dim": (int, "64", _positive),
    "model.heads": (int, "4", _positive),
    "model.ffn": (int, "128", _positive),
    "model.pos_conv": (_pair, "16:4", None),
    "model.dropout": (float, "0.0", _unit),
    "teacher.layers": (int, "4", _positive),
    "teacher.iterations": (int, "400", _nonneg),
    "teacher.lr": (float, "1e-3", _positive),
    "student.layers": (int, "2", _positive),
    "distill.layers": (_ints, "2,3,4", lambda v: len(v) > 0),
    "distill.steps": (int, "300", _nonneg),
    "distill.lr": (float, "1e-3", _positive),
    "distill.batch_size": (int, "16", _positive),
    "distill.head_init": (str, "random", _choice("random", "identity")),
    "train.lr": (float, "1e-4", _positive),
    "train.iterations": (int, "1000", _nonneg),
    "train.batch_size": (int, "16", _positive),
    "train.clip": (float, "5.0", _nonneg),
    "train.shared_optimizer": (_bool, "true", None),
    "train.checkpoint_every": (int, "0", _nonneg),
    "kws.classes": (int, "12", lambda v: v >= 2),
    "sv.margin": (float, "0.2", _nonneg),
    "sv.scale": (float, "30.0", _positive),
    "sv.variant": (str, "additive", _choice("additive")),
}


@dataclass
class Config:
    values: dict[str, Any]
    text: str = ""  # the file as read, echoed verbatim into checkpoints
    overrides: dict[str, str] | None = None

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def model_config(self, layers: int) -> ModelConfig:
        return ModelConfig(conv_layers=self["model.conv"], model_dim=self["model.dim"],
                           num_transformer_layers=layers, num_heads=self["model.heads"],
                           ffn_dim=self["model.ffn"], pos_conv=self["model.pos_conv"],
                           dropout=self["model.dropout"])

    def resolved_text(self) -> str:
        """Every key with its effective value, in schema order."""
        return "".join(f"{k} = {_format(k, self.values[k])}\n" for k in KEYS)


def _format(key: str, v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if key == "model.pos_conv":
        return ":".join(str(x) for x in v)
    if key == "model.conv":
        return ",".join(":".join(str(x) for x in item) for item in v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_config(text: str, overrides: dict[str, str] | None = None, source: str = "<config>") -> Config:
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigFileError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in KEYS:
            raise ConfigFileError(f"{source}:{lineno}: unknown key {key!r}")
        raw[key] = (value, lineno)
    for key, value in (overrides or {}).items():
        if key not in KEYS:
            raise ConfigFileError(f"override: unknown key {key!r}")
        raw[key] = (str(value), 0)

    values = {}
    for key, (parser, default, check) in KEYS.items():
        text_value, lineno = raw.get(key, (default, 0))
        where = f"{source}:{lineno}: " if lineno else ""
        try:
            value = parser(text_value)
        except ValueError as exc:
            raise ConfigFileError(f"{where}bad value for {key}: {exc}") from exc
        if check is not None and not check(value):
            raise ConfigFileError(f"{where}value {text_value!r} out of domain for {key}")
        values[key] = value
    cfg = Config(values, text, dict(overrides or {}))
    try:
        cfg.model_config(values["teacher.layers"])
    except ValueError as exc:
        raise ConfigFileError(f"model: {exc}") from exc
    if values["student.layers"] > values["teacher.layers"]:
        raise ConfigFileError("student.layers exceeds teacher.layers")
    layers = values["distill.layers"]
    if any(b <= a for a, b in zip(layers, layers[1:])) or layers[0] < 1 or layers[-1] > values["teacher.layers"]:
        raise ConfigFileError("distill.layers must be strictly increasing within the teacher depth")
    if values["kws.classes"] != values["data.keywords"]:
        raise ConfigFileError("kws.classes must equal data.keywords")
    return cfg


def load_config(path, overrides: dict[str, str] | None = None) -> Config:
    path = Path(path)
    return parse_config(path.read_text(), overrides, source=str(path))


def default_config() -> Config:
    return parse_config("")


# Named configurations accepted wherever a config path is.
PRESETS = {
    "toy": "",
    "base-reference": (
        "model.conv = 512:10:5,512:3:2,512:3:2,512:3:2,512:3:2,512:2:2,512:2:2\n"
        "model.dim = 768\n"
        "model.heads = 12\n"
        "model.ffn = 3072\n"
        "model.pos_conv = 128:16\n"
        "teacher.layers = 12\n"
        "student.layers = 2\n"
        "distill.layers = 4,8,12\n"
    ),
}


def resolve_config(name_or_path: str | None, overrides: dict[str, str] | None = None) -> Config:
    """A preset name, a file path, or ``None`` for the defaults."""
    if name_or_path is None:
        return parse_config("", overrides)
    if name_or_path in PRESETS:
        return parse_config(PRESETS[name_or_path], overrides, source=name_or_path)
    return load_config(name_or_path, overrides)
