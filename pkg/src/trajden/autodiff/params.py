"""Named parameter storage, AdamW and the binary checkpoint format."""

from __future__ import annotations

import math
import struct
import zlib
from pathlib import Path

import numpy as np

from ..geometry import DomainError
from .tensor import Grid

CKPT_MAGIC = b"TDCKPT1"


class ParamStore:
    """Ordered collection of trainable grids with deterministic He-uniform init."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = dtype
        self._params: dict[str, Grid] = {}

    def add(self, name: str, shape, fan_in: int | None = None, gain: float = math.sqrt(2.0), zero: bool = False) -> Grid:
        if name in self._params:
            raise DomainError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if zero:
            data = np.zeros(shape)
        else:
            fan_in = fan_in if fan_in is not None else int(np.prod(shape[1:]))
            bound = gain * math.sqrt(3.0 / fan_in)
            # per-name stream: init does not depend on registration order
            rng = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
            data = rng.uniform(-bound, bound, size=shape)
        g = Grid(data.astype(self.dtype), requires_grad=True, name=name)
        g.grad = np.zeros_like(g.data)
        self._params[name] = g
        return g

    def __getitem__(self, name: str) -> Grid:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self._params.items()}

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in self.grads().values()))

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            if missing or extra:
                raise DomainError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, arr in state.items():
            if n not in self._params:
                continue
            p = self._params[n]
            if tuple(arr.shape) != p.shape:
                raise DomainError(f"parameter {n!r}: checkpoint shape {tuple(arr.shape)} != model shape {p.shape}")
            p.data = np.asarray(arr, dtype=p.dtype).copy()

    def astype(self, dtype) -> "ParamStore":
        """Copy with every parameter cast, e.g. to float64 for finite-difference checks."""
        out = ParamStore(self.seed, dtype)
        for n, p in self._params.items():
            g = Grid(p.data.astype(dtype), requires_grad=True, name=n)
            g.grad = np.zeros_like(g.data)
            out._params[n] = g
        return out


class AdamW:
    """Adam with decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)."""

    def __init__(self, params: ParamStore, lr: float = 1e-4, weight_decay: float = 1e-2,
                 betas=(0.9, 0.999), eps: float = 1e-8, trainable=None):
        if lr <= 0:
            raise DomainError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        # parameters outside ``trainable`` are never updated (not even decayed)
        self.names = [n for n, _ in params if trainable is None or n in set(trainable)]
        self.m = {n: np.zeros(params[n].shape, dtype=np.float32) for n in self.names}
        self.v = {n: np.zeros(params[n].shape, dtype=np.float32) for n in self.names}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n in self.names:
            p = self.params[n]
            g = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
            m = self.b1 * self.m[n] + (1.0 - self.b1) * g
            v = self.b2 * self.v[n] + (1.0 - self.b2) * g * g
            # moments are held at checkpoint precision so a resumed run continues bit-exactly
            self.m[n], self.v[n] = m.astype(np.float32), v.astype(np.float32)
            pd = p.data.astype(np.float64)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * pd
            p.data = (pd - self.lr * update).astype(p.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"__adam_m__/{n}": a.astype(np.float32) for n, a in self.m.items()}
        out.update({f"__adam_v__/{n}": a.astype(np.float32) for n, a in self.v.items()})
        out["__adam_t__"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n in self.m:
            self.m[n] = state[f"__adam_m__/{n}"].astype(np.float32)
            self.v[n] = state[f"__adam_v__/{n}"].astype(np.float32)
        self.t = int(state["__adam_t__"][0])


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write records (u32 name length, name, u32 ndim, u32 dims..., f32 data), little-endian."""
    path = Path(path)
    buf = bytearray(CKPT_MAGIC)
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        buf += a.tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(CKPT_MAGIC):
        raise DomainError(f"{path}: not a checkpoint (bad magic)")
    off = len(CKPT_MAGIC)
    out: dict[str, np.ndarray] = {}
    while off < len(data):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
        out[name] = arr
    return out
