"""Single-file checkpoint container.

Layout (all integers little-endian)::

    magic          8 bytes   b"DDPMPA\\x00\\x01"
    version        u32
    section count  u32
    per section:   u16 name length, name (utf-8), u64 payload length, payload

Sections: ``meta`` (JSON), ``config`` (JSON), ``schedule`` (tensor table),
``params`` (tensor table), ``optimizer`` (JSON groups + tensor table), ``rng``
(raw generator state).  A tensor table is ``u32 count`` followed by entries of
``u16 name length, name, u8 dtype code, u8 ndim, u64 dims..., raw bytes``.
JSON is written with sorted keys so identical states give identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .denoiser import DenoiserConfig
from .diffusion import NoiseSchedule

MAGIC = b"DDPMPA\x00\x01"
FORMAT_VERSION = 1
SCHEDULE_FIELDS = (
    "beta",
    "alpha",
    "alpha_bar",
    "posterior_beta_hat",
    "posterior_coef_x0",
    "posterior_coef_xt",
)
REQUIRED_SECTIONS = ("meta", "config", "schedule", "params", "optimizer", "rng")

_DTYPES = {
    1: torch.float32,
    2: torch.float64,
    3: torch.int64,
    4: torch.uint8,
    5: torch.int32,
    6: torch.bool,
}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    """Raised for corrupt, incompatible or mismatched checkpoint files."""


@dataclass
class Checkpoint:
    config: dict
    model_config: DenoiserConfig
    schedule: NoiseSchedule
    params: dict[str, torch.Tensor]
    optimizer: Optional[dict]
    iteration: int
    rng_state: torch.Tensor
    meta: dict = field(default_factory=dict)


def _pack_tensors(tensors: dict[str, torch.Tensor]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(tensors)))
    for name, tensor in tensors.items():
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw_name = name.encode()
        out.write(struct.pack("<H", len(raw_name)) + raw_name)
        out.write(struct.pack("<BB", _CODES[t.dtype], t.ndim))
        out.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        arr = t.numpy()
        out.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return out.getvalue()


def _unpack_tensors(payload: bytes) -> dict[str, torch.Tensor]:
    buf = memoryview(payload)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated tensor table")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = _DTYPES[code]
        np_dtype = torch.empty(0, dtype=dtype).numpy().dtype.newbyteorder("<")
        n_bytes = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
        arr = np.frombuffer(bytes(take(n_bytes)), dtype=np_dtype).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if pos != len(buf):
        raise CheckpointError("trailing bytes in tensor table")
    return tensors


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _pack_optimizer(state: Optional[dict]) -> bytes:
    if state is None:
        groups, tensors = None, {}
    else:
        groups = state["param_groups"]
        tensors = {}
        for idx in sorted(state["state"]):
            for key, value in sorted(state["state"][idx].items()):
                tensors[f"{idx}.{key}"] = torch.as_tensor(value)
    head = _json_bytes(groups)
    return struct.pack("<Q", len(head)) + head + _pack_tensors(tensors)


def _unpack_optimizer(payload: bytes) -> Optional[dict]:
    (n,) = struct.unpack("<Q", payload[:8])
    groups = json.loads(payload[8 : 8 + n])
    tensors = _unpack_tensors(payload[8 + n :])
    if groups is None:
        return None
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    state: dict = {}
    for key, value in tensors.items():
        idx, name = key.split(".", 1)
        state.setdefault(int(idx), {})[name] = value
    return {"state": state, "param_groups": groups}


def to_bytes(ckpt: Checkpoint) -> bytes:
    schedule = {name: getattr(ckpt.schedule, name) for name in SCHEDULE_FIELDS}
    meta = dict(ckpt.meta)
    meta["iteration"] = int(ckpt.iteration)
    meta["model_config"] = ckpt.model_config.to_dict()
    sections = [
        ("meta", _json_bytes(meta)),
        ("config", _json_bytes(ckpt.config)),
        ("schedule", _pack_tensors(schedule)),
        ("params", _pack_tensors(dict(sorted(ckpt.params.items())))),
        ("optimizer", _pack_optimizer(ckpt.optimizer)),
        ("rng", ckpt.rng_state.cpu().numpy().astype(np.uint8).tobytes()),
    ]
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", FORMAT_VERSION, len(sections)))
    for name, payload in sections:
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack("<Q", len(payload)) + payload)
    return out.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    sections = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack("<H", data[pos : pos + 2])
            name = data[pos + 2 : pos + 2 + n].decode()
            pos += 2 + n
            (size,) = struct.unpack("<Q", data[pos : pos + 8])
            pos += 8
            if pos + size > len(data):
                raise CheckpointError(f"section {name!r} is truncated")
            sections[name] = data[pos : pos + size]
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"corrupt section header: {exc}") from exc
    if pos != len(data):
        raise CheckpointError("trailing bytes after last section")
    missing = [s for s in REQUIRED_SECTIONS if s not in sections]
    if missing:
        raise CheckpointError(f"missing sections: {missing}")
    try:
        meta = json.loads(sections["meta"])
        config = json.loads(sections["config"])
        model_config = DenoiserConfig(**meta.pop("model_config"))
        iteration = meta.pop("iteration")
        arrays = _unpack_tensors(sections["schedule"])
        schedule = NoiseSchedule.from_betas(arrays["beta"])
        for name in SCHEDULE_FIELDS:
            if not torch.equal(arrays[name], getattr(schedule, name)):
                raise CheckpointError(f"schedule array {name!r} inconsistent with beta")
        params = _unpack_tensors(sections["params"])
        optimizer = _unpack_optimizer(sections["optimizer"])
    except (ValueError, KeyError, TypeError, struct.error) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    rng = torch.from_numpy(np.frombuffer(sections["rng"], dtype=np.uint8).copy())
    return Checkpoint(config, model_config, schedule, params, optimizer, iteration, rng, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomic write: a temporary file in the target directory is renamed over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(to_bytes(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expect: Optional[DenoiserConfig] = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` set, reject a different architecture."""
    with open(path, "rb") as fh:
        ckpt = from_bytes(fh.read())
    if expect is not None and ckpt.model_config != expect:
        diffs = {
            k: (v, getattr(expect, k))
            for k, v in ckpt.model_config.to_dict().items()
            if getattr(expect, k) != v
        }
        raise CheckpointError(f"architecture mismatch (checkpoint vs requested): {diffs}")
    return ckpt
