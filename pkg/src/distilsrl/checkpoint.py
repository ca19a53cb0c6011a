"""Binary checkpoints.

Layout (all integers little-endian)::

    b"SRLD" | u32 version | u32 n, n bytes of UTF-8 config text
    | u32 tensor count | per tensor:
        u16 name length, name, u8 dtype code, u8 ndim, u32 dims[ndim], raw values
    | 32-byte SHA-256 of every preceding byte

Tensor names are namespaced: ``srl/<param>``, ``head/<task>/<weight|bias>``,
``distill/<layer>/<weight|bias>``, ``optim/<key>/...`` and ``state/...``.
"""
from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigFileError, parse_config
from .distill import DistillPlan
from .heads import TaskHead
from .model import EncoderModel, ModelConfig
from .tensor import Tensor
from .trainer import AdamState, TrainerState

MAGIC = b"SRLD"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
PREFIXES = ("srl/", "head/", "distill/", "optim/", "state/")


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, config_text: str, tensors: dict[str, np.ndarray]) -> str:
    """Write and return the hex digest."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = config_text.encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        if not name.startswith(PREFIXES):
            raise CheckpointError(f"unknown tensor namespace: {name}")
        arr = np.asarray(arr)
        code = CODES.get(np.dtype(arr.dtype.name))
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    body = b"".join(parts)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)
    return digest.hex()


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) >= 4 and blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 4 + 4 + 32:
        raise CheckpointError(f"{path}: digest mismatch (file truncated)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: digest mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {VERSION}")
    pos = 8
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    config_text = body[pos:pos + n].decode("utf-8")
    pos += n
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + ln].decode("utf-8")
        pos += ln
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        if code not in DTYPES:
            raise CheckpointError(f"{path}: {name} has unknown dtype code {code}")
        if not name.startswith(PREFIXES):
            raise CheckpointError(f"{path}: unknown tensor name {name}")
        dt = DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape) \
            .astype(dt.newbyteorder("="))
        pos += nbytes
    if pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return config_text, tensors


# --------------------------------------------------------------------------- model-level API

@dataclass
class Checkpoint:
    config_text: str
    model: EncoderModel | None = None
    heads: dict[str, TaskHead] = field(default_factory=dict)
    plan: DistillPlan | None = None
    trainer_state: TrainerState | None = None
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _optim_tensors(prefix: str, st: AdamState) -> dict[str, np.ndarray]:
    out = {f"{prefix}/hyper": np.array([st.lr, st.beta1, st.beta2, st.eps], dtype=np.float64),
           f"{prefix}/t": np.array(st.t, dtype=np.int64)}
    for name in st.m:
        out[f"{prefix}/m/{name}"] = st.m[name]
        out[f"{prefix}/v/{name}"] = st.v[name]
        out[f"{prefix}/steps/{name}"] = np.array(st.steps[name], dtype=np.int64)
    return out


def save_checkpoint(path, model: EncoderModel | None = None, heads: dict[str, TaskHead] | None = None, *,
                    config_text: str = "", plan: DistillPlan | None = None,
                    trainer_state: TrainerState | None = None) -> str:
    tensors: dict[str, np.ndarray] = {}
    if model is not None:
        tensors.update({f"srl/{k}": v.data for k, v in model.params.items()})
    for task, head in (heads or {}).items():
        tensors.update({f"head/{task}/{k}": v.data for k, v in head.params().items()})
    if plan is not None:
        tensors.update({f"distill/{k}": v.data for k, v in plan.params().items()})
    if trainer_state is not None:
        tensors["state/iteration"] = np.array(trainer_state.iteration, dtype=np.int64)
        for task, position in trainer_state.positions.items():
            tensors[f"state/position/{task}"] = np.array(position, dtype=np.int64)
        for key, st in trainer_state.optimizers.items():
            tensors.update(_optim_tensors(f"optim/{key}", st))
    return write_checkpoint(path, config_text, tensors)


def _infer_model_config(config_text: str, tensors: dict[str, np.ndarray]) -> ModelConfig:
    try:
        cfg = parse_config(config_text)
    except ConfigFileError as exc:
        raise CheckpointError(f"config echo does not parse: {exc}") from exc
    layers = {int(m.group(1)) for name in tensors if (m := re.match(r"srl/layers\.(\d+)\.", name))}
    if not layers:
        raise CheckpointError("checkpoint holds no transformer layers")
    return cfg.model_config(max(layers))


def load_checkpoint(path, model_config: ModelConfig | None = None) -> Checkpoint:
    """Rebuild whatever the file holds; structure comes from the config echo and tensor names."""
    config_text, tensors = read_checkpoint(path)
    ck = Checkpoint(config_text, tensors=tensors)
    srl = {k[4:]: v for k, v in tensors.items() if k.startswith("srl/")}
    if srl:
        mc = model_config or _infer_model_config(config_text, tensors)
        params = {k: Tensor(v.copy(), requires_grad=True, dtype=v.dtype) for k, v in srl.items()}
        try:
            ck.model = EncoderModel(mc, params)
        except ValueError as exc:
            raise CheckpointError(f"{path}: {exc}") from exc

    margin, scale = 0.2, 30.0
    if config_text.strip():
        try:
            cfg = parse_config(config_text)
            margin, scale = cfg["sv.margin"], cfg["sv.scale"]
        except ConfigFileError:
            pass
    for task in ("kws", "sv"):
        w = tensors.get(f"head/{task}/weight")
        if w is None:
            continue
        b = tensors.get(f"head/{task}/bias")
        ck.heads[task] = TaskHead(task, Tensor(w.copy(), requires_grad=True, dtype=w.dtype),
                                  None if b is None else Tensor(b.copy(), requires_grad=True, dtype=b.dtype),
                                  margin=margin, scale=scale)
    unknown_heads = {k.split("/")[1] for k in tensors if k.startswith("head/")} - {"kws", "sv"}
    if unknown_heads:
        raise CheckpointError(f"{path}: unknown head(s) {sorted(unknown_heads)}")

    layers = sorted({int(k.split("/")[1]) for k in tensors if k.startswith("distill/")})
    if layers:
        heads = {}
        for p in layers:
            w, b = tensors[f"distill/{p}/weight"], tensors[f"distill/{p}/bias"]
            heads[p] = (Tensor(w.copy(), requires_grad=True, dtype=w.dtype),
                        Tensor(b.copy(), requires_grad=True, dtype=b.dtype))
        ck.plan = DistillPlan(tuple(layers), heads)

    if "state/iteration" in tensors:
        optimizers = {}
        for key in sorted({k.split("/")[1] for k in tensors if k.startswith("optim/")}):
            pre = f"optim/{key}/"
            lr, b1, b2, eps = tensors[pre + "hyper"].tolist()
            st = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, t=int(tensors[pre + "t"]))
            for name in tensors:
                if name.startswith(pre + "m/"):
                    pname = name[len(pre + "m/"):]
                    st.m[pname] = tensors[name].copy()
                    st.v[pname] = tensors[pre + "v/" + pname].copy()
                    st.steps[pname] = int(tensors[pre + "steps/" + pname])
            optimizers[key] = st
        positions = {k.split("/")[2]: int(v) for k, v in tensors.items() if k.startswith("state/position/")}
        ck.trainer_state = TrainerState(int(tensors["state/iteration"]), optimizers, positions)
    return ck
