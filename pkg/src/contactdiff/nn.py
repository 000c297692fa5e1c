"""Small deterministic neural-network toolkit.

Parameters live in a :class:`ParamStore` (an ordered table of named torch
tensors).  Layers are plain functions of ``(params, prefix, inputs)``;
gradients come from torch autograd and the Adam update is written out here so
its state is explicit and checkpointable.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes   b"CDMCKPT\\0"
    version    u32       1
    meta_len   u32       length of the JSON metadata blob
    meta       bytes     UTF-8 JSON
    count      u32       number of tensors
    per tensor:
        name_len u16, name (UTF-8)
        dtype    u8      1 = float32, 2 = float64, 3 = int64
        ndim     u8
        shape    u32 * ndim
        payload  prod(shape) * itemsize bytes, C order, little-endian
"""

from __future__ import annotations

import json
import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

MAGIC = b"CDMCKPT\0"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


class NonFiniteLossError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def set_threads() -> None:
    """Honour ``CDM_THREADS`` as a cap on torch intra-op parallelism."""
    n = os.environ.get("CDM_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


class ParamStore:
    """Ordered mapping of parameter name to a leaf tensor requiring grad."""

    def __init__(self, tensors: dict[str, torch.Tensor] | None = None, dtype=torch.float32):
        self.dtype = dtype
        self._t: OrderedDict[str, torch.Tensor] = OrderedDict()
        for k, v in (tensors or {}).items():
            self.add(k, v)

    def add(self, name: str, value) -> torch.Tensor:
        if name in self._t:
            raise KeyError(f"duplicate parameter {name!r}")
        t = torch.as_tensor(np.asarray(value), dtype=self.dtype).clone().requires_grad_(True)
        self._t[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __len__(self) -> int:
        return len(self._t)

    def keys(self):
        return self._t.keys()

    def items(self):
        return self._t.items()

    def values(self):
        return self._t.values()

    def n_params(self) -> int:
        return sum(t.numel() for t in self._t.values())

    def to(self, dtype) -> "ParamStore":
        return ParamStore({k: v.detach().numpy() for k, v in self._t.items()}, dtype=dtype)

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self._t.items()}

    def clone(self) -> "ParamStore":
        return ParamStore(self.numpy(), dtype=self.dtype)

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self._t.values())


# ---------------------------------------------------------------------------
# initialisation and layers


def init_dense(store: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0):
    """Fan-in scaled uniform weights, zero bias."""
    bound = scale / math.sqrt(n_in)
    store.add(f"{name}.w", rng.uniform(-bound, bound, size=(n_in, n_out)))
    store.add(f"{name}.b", np.zeros(n_out))


def init_film_head(store: ParamStore, name: str, n_in: int, channels: int):
    """Zero head so that gamma = 1 and beta = 0 before training."""
    store.add(f"{name}.w", np.zeros((n_in, 2 * channels)))
    store.add(f"{name}.b", np.zeros(2 * channels))


def dense_forward(params: ParamStore, name: str, x: torch.Tensor) -> torch.Tensor:
    w = params[f"{name}.w"]
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"{name}: input width {x.shape[-1]} != {w.shape[0]}")
    return x @ w + params[f"{name}.b"]


def film_params(params: ParamStore, name: str, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    out = dense_forward(params, name, cond)
    delta, beta = out.chunk(2, dim=-1)
    return 1.0 + delta, beta


def film_apply(x, gamma, beta):
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise ValueError("FiLM parameters must match the feature width")
    return gamma * x + beta


def silu(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.silu(x)


def fourier_frequencies(n_freq: int, max_freq: float) -> np.ndarray:
    return np.geomspace(1.0, max_freq, n_freq)


def fourier_embed(s, freqs) -> torch.Tensor:
    """``[sin(2 pi f_j s), cos(2 pi f_j s)]_j`` for scalar(s) ``s``; last axis 2*n_freq."""
    s = torch.as_tensor(s, dtype=torch.float64)
    f = torch.as_tensor(np.asarray(freqs), dtype=torch.float64)
    ang = 2.0 * math.pi * s[..., None] * f
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)
    return out.reshape(*ang.shape[:-1], 2 * len(f))


# ---------------------------------------------------------------------------
# gradients and optimisation


def grad(loss_fn: Callable, params: ParamStore, batch) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss value and its gradient for every parameter.

    Parameters that do not influence the loss get an exact zero gradient.
    """
    loss = loss_fn(params, batch)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss.item()}")
    names = list(params.keys())
    gs = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    out = OrderedDict()
    for n, g in zip(names, gs):
        out[n] = torch.zeros_like(params[n]) if g is None else g
    return float(loss.item()), out


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: dict[str, torch.Tensor], state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * g * g
            state.m[name] = m
            state.v[name] = v
            p -= lr * (m / c1) / (torch.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(_DTYPES[code], copy=False).tobytes()


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    parts += [_pack_tensor(k, np.asarray(v)) for k, v in tensors.items()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    meta = json.loads(data[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(data):
                raise CheckpointError("truncated checkpoint")
            out[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
            off += nbytes
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    return out, meta


def save_params(path, params: ParamStore, meta: dict | None = None, adam: AdamState | None = None,
                extra: dict[str, np.ndarray] | None = None) -> None:
    tensors: dict[str, np.ndarray] = OrderedDict(params.numpy())
    meta = dict(meta or {})
    if adam is not None:
        meta["adam_step"] = adam.step
        for k in params.keys():
            if k in adam.m:
                tensors[f"adam.m/{k}"] = adam.m[k].numpy()
                tensors[f"adam.v/{k}"] = adam.v[k].numpy()
    for k, v in (extra or {}).items():
        tensors[f"extra/{k}"] = v
    save_tensors(path, tensors, meta)


def load_params(path) -> tuple[ParamStore, dict, AdamState, dict[str, np.ndarray]]:
    tensors, meta = load_tensors(path)
    plain = OrderedDict((k, v) for k, v in tensors.items() if "/" not in k)
    dtype = torch.float64 if any(v.dtype == np.float64 for v in plain.values()) else torch.float32
    params = ParamStore(plain, dtype=dtype)
    adam = AdamState(step=int(meta.get("adam_step", 0)))
    extra = {}
    for k, v in tensors.items():
        if k.startswith("adam.m/"):
            adam.m[k[7:]] = torch.from_numpy(v.copy())
        elif k.startswith("adam.v/"):
            adam.v[k[7:]] = torch.from_numpy(v.copy())
        elif k.startswith("extra/"):
            extra[k[6:]] = v
    return params, meta, adam, extra

