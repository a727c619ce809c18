"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"HPLO" | u16 version | u32 meta_len | meta (UTF-8 JSON)
    repeated: u16 name_len | name | u8 dtype | u8 rank | u32 extents[rank] | raw values

dtype code 1 stores 32-bit floats, 2 stores 64-bit floats.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .connectors import PreScaler
from .model import ModelBundle, ModelConfig

MAGIC = b"HPLO"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODES = {torch.float32: 1, torch.float64: 2}


class CheckpointFormatError(ValueError):
    pass


def _meta_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(bundle: ModelBundle, extra: dict | None = None) -> bytes:
    ext = dict(getattr(bundle, "extra_meta", {}) or {})
    if extra:
        ext.update(extra)
    meta = {"model": bundle.metadata(), "extra": ext}
    buf = io.BytesIO()
    mb = _meta_bytes(meta)
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(mb)))
    buf.write(mb)
    for name, p in bundle.named_parameters():
        code = CODES.get(p.dtype)
        if code is None:
            raise CheckpointFormatError(f"unsupported dtype {p.dtype} for {name}")
        nb = name.encode("utf-8")
        arr = p.detach().cpu().contiguous().numpy().astype(DTYPES[code], copy=False)
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(bundle: ModelBundle, path, extra: dict | None = None) -> Path:
    path = Path(path)
    data = checkpoint_bytes(bundle, extra)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def done(self) -> bool:
        return self.pos >= len(self.data)


def read_metadata(path) -> dict:
    r = _Reader(Path(path).read_bytes())
    return _header(r)


def _header(r: _Reader) -> dict:
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic: not a HaploOmni checkpoint")
    version, meta_len = r.unpack("<HI")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    try:
        return json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"corrupt metadata: {e}") from None


def load_checkpoint(path) -> ModelBundle:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {e}") from None
    r = _Reader(data)
    meta = _header(r)
    m = meta["model"]
    bundle = ModelBundle(ModelConfig(**m["config"]), seed=m["seed"])
    params = dict(bundle.named_parameters())
    seen = set()
    while not r.done:
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        raw = r.take(count * DTYPES[code].itemsize)
        if name not in params:
            raise CheckpointFormatError(f"unknown parameter name {name!r}")
        p = params[name]
        if tuple(p.shape) != tuple(shape):
            raise CheckpointFormatError(f"{name}: stored shape {shape} != expected {tuple(p.shape)}")
        arr = np.frombuffer(raw, dtype=DTYPES[code]).reshape(shape)
        value = torch.from_numpy(arr.copy()).to(torch.float64 if code == 2 else torch.float32)
        p.data = value
        seen.add(name)
    missing = sorted(set(params) - seen)
    if missing:
        raise CheckpointFormatError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    bundle.prescale_pre = PreScaler.from_state(m["prescale_pre"])
    bundle.prescale_post = PreScaler.from_state(m["prescale_post"])
    bundle.prescaling = m["prescaling"]
    bundle.set_routing(m["routing"])
    bundle.extra_meta = meta.get("extra", {})
    for mod in bundle.modules():
        if hasattr(mod, "clear_cache"):
            mod.clear_cache()
    return bundle
