"""Binary checkpoint container.

Layout (all header lines ASCII, ``\\n`` terminated)::

    DIMEKIT1
    config <n bytes>
    <ModelConfig as JSON, n bytes>
    meta <n bytes>
    <free-form JSON metadata, n bytes>
    tensors <count>
    <name> <ndim> <dim_0> ... <dim_ndim-1>
    <prod(dims) little-endian float64 values>
    ...

Tensor names must not contain whitespace.  Values are stored bit-exactly.
"""

from __future__ import annotations

import io
import json
import os
from typing import Optional, Union

import numpy as np

from .errors import InputError
from .model import ModelConfig, ParameterStore

__all__ = ["MAGIC", "save_checkpoint", "load_checkpoint", "save_members", "load_members", "dumps", "loads"]

MAGIC = b"DIMEKIT1"
_F8 = np.dtype("<f8")


def _json_block(tag: str, obj) -> bytes:
    body = json.dumps(obj, sort_keys=True, indent=1).encode("utf-8")
    return f"{tag} {len(body)}\n".encode("ascii") + body + b"\n"


def dumps(cfg: ModelConfig, params: ParameterStore, meta: Optional[dict] = None) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC + b"\n")
    out.write(_json_block("config", cfg.to_dict()))
    out.write(_json_block("meta", meta or {}))
    out.write(f"tensors {len(params)}\n".encode("ascii"))
    for name, arr in params.items():
        if not name or any(ch.isspace() for ch in name):
            raise InputError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr)
        dims = " ".join(str(d) for d in arr.shape)
        out.write(f"{name} {arr.ndim} {dims}".rstrip().encode("ascii") + b"\n")
        out.write(np.ascontiguousarray(arr, dtype=_F8).tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def line(self) -> str:
        end = self.data.find(b"\n", self.pos)
        if end < 0:
            raise InputError("truncated checkpoint: missing header line")
        text = self.data[self.pos:end]
        self.pos = end + 1
        try:
            return text.decode("ascii")
        except UnicodeDecodeError:
            raise InputError("corrupt checkpoint header") from None

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise InputError("truncated checkpoint: payload shorter than declared")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def json_block(self, tag: str):
        head = self.line().split()
        if len(head) != 2 or head[0] != tag or not head[1].isdigit():
            raise InputError(f"expected '{tag} <n bytes>' header")
        body = self.take(int(head[1]))
        if self.take(1) != b"\n":
            raise InputError(f"{tag} block not newline-terminated")
        try:
            return json.loads(body.decode("utf-8"))
        except ValueError as exc:
            raise InputError(f"bad {tag} JSON: {exc}") from None


def loads(data: bytes):
    """Inverse of :func:`dumps`; returns ``(ModelConfig, ParameterStore, meta)``."""
    rd = _Reader(data)
    if rd.line().encode("ascii") != MAGIC:
        raise InputError("not a dimekit checkpoint (bad magic)")
    cfg = ModelConfig.from_dict(rd.json_block("config"))
    meta = rd.json_block("meta")
    head = rd.line().split()
    if len(head) != 2 or head[0] != "tensors" or not head[1].isdigit():
        raise InputError("expected 'tensors <count>' header")
    params = ParameterStore()
    for _ in range(int(head[1])):
        fields = rd.line().split()
        try:
            name, ndim = fields[0], int(fields[1])
            shape = tuple(int(v) for v in fields[2:])
        except (IndexError, ValueError):
            raise InputError("bad tensor header") from None
        if len(shape) != ndim or any(d < 0 for d in shape):
            raise InputError(f"tensor {name}: shape does not match ndim")
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(rd.take(count * 8), dtype=_F8).astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise InputError(f"tensor {name} holds non-finite values")
        params[name] = arr
    if rd.pos != len(data):
        raise InputError("trailing bytes after last tensor")
    return cfg, params, meta


def save_checkpoint(path: Union[str, os.PathLike], cfg: ModelConfig, params: ParameterStore,
                    meta: Optional[dict] = None) -> None:
    blob = dumps(cfg, params, meta)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: Union[str, os.PathLike]):
    try:
        with open(path, "rb") as fh:
            return loads(fh.read())
    except FileNotFoundError:
        raise InputError(f"checkpoint not found: {path}") from None


def save_members(path, cfg: ModelConfig, members, meta: Optional[dict] = None) -> None:
    """Several parameter sets in one file, tensor names prefixed ``member<k>/``."""
    merged = ParameterStore()
    for k, p in enumerate(members):
        for name, arr in p.items():
            merged[f"member{k}/{name}"] = arr
    meta = dict(meta or {})
    meta["members"] = len(members)
    save_checkpoint(path, cfg, merged, meta)


def load_members(path):
    """Inverse of :func:`save_members`; a plain checkpoint loads as one member."""
    cfg, params, meta = load_checkpoint(path)
    k = meta.get("members")
    if k is None:
        return cfg, [params], meta
    members = [ParameterStore() for _ in range(int(k))]
    for name, arr in params.items():
        head, _, rest = name.partition("/")
        if not head.startswith("member") or not rest or not head[6:].isdigit() or int(head[6:]) >= len(members):
            raise InputError(f"unexpected tensor {name!r} in multi-member checkpoint")
        members[int(head[6:])][rest] = arr
    return cfg, members, meta
