"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"EDRN"                      magic
    u32 version                  currently 1
    u32 meta_len, meta bytes     UTF-8 JSON: kpn config, train config, adam
                                 hyper-parameters and step, rng state, iteration
    u32 n_tensors
    n_tensors x:
        u16 name_len, name       UTF-8, e.g. "param/enc0.conv1.weight", "adam_m/head.bias"
        u8 dtype                 0 = float32, 1 = float64
        u8 ndim, ndim x u32 dim
        raw little-endian data   row-major
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError
from .fsutil import atomic_write
from .kpn import KpnConfig, KpnParams, kpn_init
from .tensor import AdamState

MAGIC = b"EDRN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    params: KpnParams
    adam: AdamState = None
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)
    train_config: dict = None

    @property
    def kpn_config(self):
        return self.params.config


def _write_tensor(buf, name, arr):
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
    code = _CODES[arr.dtype]
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def to_bytes(ckpt):
    meta = {
        "kpn_config": ckpt.params.config.to_dict(),
        "train_config": ckpt.train_config,
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state,
        "adam": None,
    }
    tensors = [(f"param/{k}", v) for k, v in ckpt.params.arrays().items()]
    if ckpt.adam is not None:
        a = ckpt.adam
        meta["adam"] = {"step": a.step, "lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps}
        tensors += [(f"adam_m/{k}", v) for k, v in a.m.items()]
        tensors += [(f"adam_v/{k}", v) for k, v in a.v.items()]
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data):
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")

    config = KpnConfig.from_dict(meta["kpn_config"])
    template = kpn_init(config, 0)
    arrays = {}
    for k, ref in template.arrays().items():
        key = f"param/{k}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        if tensors[key].shape != ref.shape:
            raise CheckpointError(f"tensor {key!r} has shape {tensors[key].shape}, config implies {ref.shape}")
        arrays[k] = tensors[key]
    params = template.with_arrays(arrays)

    adam = None
    if meta.get("adam") is not None:
        a = meta["adam"]
        missing = [f"{p}/{k}" for p in ("adam_m", "adam_v") for k in arrays if f"{p}/{k}" not in tensors]
        if missing:
            raise CheckpointError(f"checkpoint is missing optimizer tensor {missing[0]!r}")
        adam = AdamState(
            m={k: tensors[f"adam_m/{k}"] for k in arrays},
            v={k: tensors[f"adam_v/{k}"] for k in arrays},
            step=a["step"],
            lr=a["lr"],
            beta1=a["beta1"],
            beta2=a["beta2"],
            eps=a["eps"],
        )
    return Checkpoint(
        params=params,
        adam=adam,
        iteration=meta["iteration"],
        rng_state=meta.get("rng_state") or {},
        train_config=meta.get("train_config"),
    )


def save_checkpoint(path, ckpt):
    data = to_bytes(ckpt)
    atomic_write(path, lambda fh: fh.write(data))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
