"""CNN + transformer speech encoders (teacher and student share this code).

Layout of one encoder, in parameter-enumeration order:

* ``conv.{i}.weight``: bias-free 1-D convolutions over the raw waveform, each
  followed by GELU; the first one also has a per-frame layer norm
  (``conv.0.norm.*``) between convolution and activation.
* ``proj.norm.*``, ``proj.weight``, ``proj.bias``: layer norm and linear
  projection from conv channels to ``model_dim``.
* ``pos_conv.weight``, ``pos_conv.bias``: grouped convolutional positional
  embedding (same-length output, GELU), added to the projected features.
* ``encoder.norm.*``: layer norm applied before the first transformer block.
* ``layers.{l}.*`` for ``l = 1..L``: post-norm transformer blocks.

Hidden state 0 is the encoder input after ``encoder.norm``; hidden state ``l``
is the output of block ``l``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .tensor import Tensor, check_finite, default_dtype


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    conv_layers: tuple[tuple[int, int, int], ...]  # (channels, kernel, stride)
    model_dim: int
    num_transformer_layers: int
    num_heads: int
    ffn_dim: int
    pos_conv: tuple[int, int] = (16, 4)  # (kernel, groups)
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "conv_layers", tuple(tuple(int(v) for v in c) for c in self.conv_layers))
        object.__setattr__(self, "pos_conv", tuple(int(v) for v in self.pos_conv))
        self.validate()

    def validate(self) -> None:
        if not self.conv_layers:
            raise ConfigError("conv_layers must not be empty")
        for ch, k, s in self.conv_layers:
            if ch < 1 or k < 1 or s < 1:
                raise ConfigError(f"invalid conv layer {(ch, k, s)}")
        if self.model_dim < 1 or self.num_heads < 1 or self.ffn_dim < 1:
            raise ConfigError("model_dim, num_heads and ffn_dim must be positive")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.num_transformer_layers < 1:
            raise ConfigError("num_transformer_layers must be >= 1")
        k, groups = self.pos_conv
        if k < 1 or groups < 1 or self.model_dim % groups:
            raise ConfigError(f"pos_conv {self.pos_conv} incompatible with model_dim {self.model_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")

    @property
    def conv_channels(self) -> int:
        return self.conv_layers[-1][0]

    def receptive_field(self) -> int:
        """Shortest waveform that yields one output frame."""
        r = 1
        for _, k, s in reversed(self.conv_layers):
            r = (r - 1) * s + k
        return r

    def num_frames(self, num_samples: int) -> int:
        t = num_samples
        for _, k, s in self.conv_layers:
            if t < k:
                raise ValueError(f"input of {num_samples} samples is shorter than the receptive field "
                                 f"{self.receptive_field()}")
            t = (t - k) // s + 1
        return t

    def with_layers(self, n: int) -> "ModelConfig":
        return dataclasses.replace(self, num_transformer_layers=n)


def toy_config(num_layers: int = 4) -> ModelConfig:
    return ModelConfig(conv_layers=((32, 10, 5), (32, 3, 2)), model_dim=64, num_transformer_layers=num_layers,
                       num_heads=4, ffn_dim=128, pos_conv=(16, 4), dropout=0.0)


def base_config(num_layers: int = 12) -> ModelConfig:
    """The BASE-size encoder family (used for parameter counting)."""
    convs = ((512, 10, 5),) + tuple((512, k, 2) for k in (3, 3, 3, 3, 2, 2))
    return ModelConfig(conv_layers=convs, model_dim=768, num_transformer_layers=num_layers, num_heads=12,
                       ffn_dim=3072, pos_conv=(128, 16), dropout=0.0)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; this order is the enumeration order everywhere."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, (ch, k, _) in enumerate(cfg.conv_layers):
        shapes[f"conv.{i}.weight"] = (ch, c_in, k)
        if i == 0:
            shapes["conv.0.norm.gain"] = (ch,)
            shapes["conv.0.norm.bias"] = (ch,)
        c_in = ch
    d, f = cfg.model_dim, cfg.ffn_dim
    shapes["proj.norm.gain"] = (c_in,)
    shapes["proj.norm.bias"] = (c_in,)
    shapes["proj.weight"] = (c_in, d)
    shapes["proj.bias"] = (d,)
    pk, pg = cfg.pos_conv
    shapes["pos_conv.weight"] = (d, d // pg, pk)
    shapes["pos_conv.bias"] = (d,)
    shapes["encoder.norm.gain"] = (d,)
    shapes["encoder.norm.bias"] = (d,)
    for layer in range(1, cfg.num_transformer_layers + 1):
        shapes.update(layer_parameter_shapes(cfg, layer))
    return shapes


def layer_parameter_shapes(cfg: ModelConfig, layer: int) -> dict[str, tuple[int, ...]]:
    d, f = cfg.model_dim, cfg.ffn_dim
    p = f"layers.{layer}."
    shapes = {}
    for name in ("q", "k", "v", "o"):
        shapes[p + f"attn.{name}.weight"] = (d, d)
        shapes[p + f"attn.{name}.bias"] = (d,)
    shapes[p + "attn_norm.gain"] = (d,)
    shapes[p + "attn_norm.bias"] = (d,)
    shapes[p + "ffn.in.weight"] = (d, f)
    shapes[p + "ffn.in.bias"] = (f,)
    shapes[p + "ffn.out.weight"] = (f, d)
    shapes[p + "ffn.out.bias"] = (d,)
    shapes[p + "ffn_norm.gain"] = (d,)
    shapes[p + "ffn_norm.bias"] = (d,)
    return shapes


def init_parameter(name: str, shape: tuple[int, ...], rng: np.random.Generator, dtype) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape, dtype=dtype)
    if name.endswith(".bias"):
        return np.zeros(shape, dtype=dtype)
    if len(shape) == 3:  # conv: (out, in/groups, k)
        fan_in = shape[1] * shape[2]
    else:
        fan_in = shape[0]
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)


class EncoderModel:
    """Parameter store plus forward pass for one encoder."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], frozen: bool = False):
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            raise ConfigError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name}: shape {params[name].shape} != {shape}")
        self.config = config
        self.params = params
        self._frozen = False
        self.frozen = frozen

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        for p in self.params.values():
            p.requires_grad = not self._frozen

    @property
    def num_layers(self) -> int:
        return self.config.num_transformer_layers

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def forward_hidden(self, wave, upto_layer: int | None = None,
                       rng: np.random.Generator | None = None) -> list[Tensor]:
        return forward_hidden(self, wave, upto_layer, rng)

    def __call__(self, wave, rng: np.random.Generator | None = None) -> Tensor:
        return forward_hidden(self, wave, None, rng)[-1]


def build_model(cfg: ModelConfig, seed: int, dtype=None) -> EncoderModel:
    cfg.validate()
    dtype = np.dtype(dtype or default_dtype())
    rng = np.random.default_rng(seed)
    params = {name: Tensor(init_parameter(name, shape, rng, dtype), requires_grad=True, dtype=dtype)
              for name, shape in parameter_shapes(cfg).items()}
    return EncoderModel(cfg, params)


def count_parameters(m) -> int:
    """Exact number of scalars in an :class:`EncoderModel` or implied by a :class:`ModelConfig`."""
    if isinstance(m, ModelConfig):
        return int(sum(int(np.prod(s)) for s in parameter_shapes(m).values()))
    if isinstance(m, EncoderModel):
        return int(sum(p.size for p in m.params.values()))
    return int(sum(p.size for p in m))


# --------------------------------------------------------------------------- forward pass

def _attention(x: Tensor, p: dict[str, Tensor], pre: str, heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // heads

    def split(name):
        y = ops.linear(x, p[pre + f"attn.{name}.weight"], p[pre + f"attn.{name}.bias"])
        return ops.transpose(ops.reshape(y, (b, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = ops.matmul(ops.scale(q, 1.0 / np.sqrt(dh)), ops.transpose(k))
    ctx = ops.matmul(ops.softmax(scores), v)
    ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return ops.linear(ctx, p[pre + "attn.o.weight"], p[pre + "attn.o.bias"])


def transformer_block(x: Tensor, p: dict[str, Tensor], layer: int, cfg: ModelConfig,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Post-norm block: attention, residual, norm, GELU FFN, residual, norm."""
    pre = f"layers.{layer}."
    a = ops.dropout(_attention(x, p, pre, cfg.num_heads), cfg.dropout, rng)
    x = ops.layer_norm(x + a, p[pre + "attn_norm.gain"], p[pre + "attn_norm.bias"])
    h = ops.gelu(ops.linear(x, p[pre + "ffn.in.weight"], p[pre + "ffn.in.bias"]))
    h = ops.dropout(ops.linear(h, p[pre + "ffn.out.weight"], p[pre + "ffn.out.bias"]), cfg.dropout, rng)
    return ops.layer_norm(x + h, p[pre + "ffn_norm.gain"], p[pre + "ffn_norm.bias"])


def encode_features(m: EncoderModel, wave: Tensor, rng=None) -> Tensor:
    """Waveform ``B x S`` -> hidden state 0, ``B x T' x D``."""
    cfg, p = m.config, m.params
    x = ops.reshape(wave, (wave.shape[0], 1, wave.shape[1]))
    for i, (_, _, stride) in enumerate(cfg.conv_layers):
        x = ops.conv1d(x, p[f"conv.{i}.weight"], stride=stride)
        if i == 0:
            x = ops.transpose(ops.layer_norm(ops.transpose(x), p["conv.0.norm.gain"], p["conv.0.norm.bias"]))
        x = ops.gelu(x)
    x = ops.layer_norm(ops.transpose(x), p["proj.norm.gain"], p["proj.norm.bias"])
    h = ops.dropout(ops.linear(x, p["proj.weight"], p["proj.bias"]), cfg.dropout, rng)

    k, groups = cfg.pos_conv
    t = h.shape[1]
    pos = ops.pad_time(ops.transpose(h), k // 2, k // 2)
    pos = ops.conv1d(pos, p["pos_conv.weight"], stride=1, groups=groups)
    if pos.shape[-1] != t:
        pos = pos[..., :t]
    pos = ops.gelu(ops.transpose(pos) + p["pos_conv.bias"])
    return ops.layer_norm(h + pos, p["encoder.norm.gain"], p["encoder.norm.bias"])


def forward_hidden(m: EncoderModel, wave, upto_layer: int | None = None,
                   rng: np.random.Generator | None = None) -> list[Tensor]:
    """Hidden states ``[h_0, h_1, ..., h_upto]``.

    ``wave`` is ``S`` (one utterance, states come back ``T' x D``) or ``B x S``.
    """
    cfg = m.config
    if upto_layer is None:
        upto_layer = cfg.num_transformer_layers
    if not 0 <= upto_layer <= cfg.num_transformer_layers:
        raise ValueError(f"upto_layer {upto_layer} outside [0, {cfg.num_transformer_layers}]")
    if not isinstance(wave, Tensor):
        wave = Tensor(np.asarray(wave), dtype=next(iter(m.params.values())).dtype)
    unbatched = wave.ndim == 1
    if unbatched:
        wave = ops.reshape(wave, (1, wave.shape[0]))
    if wave.ndim != 2:
        raise ValueError(f"waveform must be (S,) or (B, S), got {wave.shape}")
    if wave.shape[1] < cfg.receptive_field():
        raise ValueError(f"input too short: {wave.shape[1]} samples < receptive field {cfg.receptive_field()}")

    states = [encode_features(m, wave, rng)]
    for layer in range(1, upto_layer + 1):
        states.append(transformer_block(states[-1], m.params, layer, cfg, rng))
    for s in states:
        check_finite(s.data, "hidden state")
    if unbatched:
        states = [ops.reshape(s, s.shape[1:]) for s in states]
    return states
