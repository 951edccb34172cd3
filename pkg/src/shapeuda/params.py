"""Named parameter storage, initialisation, SGD and gradient checking."""
from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .autodiff import DTYPE, Tensor


class ParamStore:
    """Ordered mapping of unique names to leaf Tensors.

    Trainable entries carry ``requires_grad=True`` and receive gradients.
    Non-trainable entries (batch-norm running statistics, frozen networks)
    are never touched by :func:`sgd_step`.
    """

    def __init__(self):
        self._entries: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=trainable, name=name)
        t.zero_grad()
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def trainable(self) -> list[Tensor]:
        return [t for t in self._entries.values() if t.requires_grad]

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].requires_grad

    def set_trainable(self, flag: bool, predicate: Callable[[str], bool] | None = None):
        for name, t in self._entries.items():
            if predicate is None or predicate(name):
                t.requires_grad = flag

    def num_trainable(self) -> int:
        return int(np.sum([t.data.size for t in self.trainable()]))

    def zero_grad(self):
        for t in self._entries.values():
            t.zero_grad()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self._entries.items():
            out.add(name, t.data.copy(), trainable=t.requires_grad)
        return out

    def load_values(self, other: "ParamStore"):
        """Overwrite values (not flags) from a store with identical names and shapes."""
        if list(other) != list(self):
            raise KeyError("parameter names differ")
        for name, t in self._entries.items():
            src = other[name].data
            if src.shape != t.data.shape:
                raise ValueError(f"{name}: shape {src.shape} != {t.data.shape}")
            t.data = src.copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self._entries.items():
            h.update(name.encode())
            h.update(str(t.data.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def grad_norm(params: ParamStore) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(t.grad, dtype=np.float64))) for t in params.trainable())))


def sgd_step(params: ParamStore, lr: float, clip_norm: float | None = None):
    """w <- w - lr * grad on trainable entries, then zero every gradient.

    With ``clip_norm`` the whole gradient is rescaled when its global L2 norm
    exceeds that value.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    scale = 1.0
    if clip_norm is not None and lr:
        n = grad_norm(params)
        if n > clip_norm:
            scale = clip_norm / n
    for t in params.trainable():
        if lr:
            t.data = (t.data - DTYPE(lr * scale) * t.grad).astype(DTYPE)
    params.zero_grad()


class SGD:
    """Stateful SGD with optional classical momentum and gradient-norm clipping.

    ``v <- momentum * v + g``; ``w <- w - lr * v``. With momentum 0 a step is
    exactly :func:`sgd_step`.
    """

    def __init__(self, params: ParamStore, lr: float, momentum: float = 0.0, clip_norm: float | None = None):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.params, self.lr, self.momentum, self.clip_norm = params, lr, momentum, clip_norm
        self.velocity: dict[str, np.ndarray] = {}

    def step(self):
        if self.momentum == 0.0:
            return sgd_step(self.params, self.lr, self.clip_norm)
        scale = 1.0
        if self.clip_norm is not None:
            n = grad_norm(self.params)
            if n > self.clip_norm:
                scale = self.clip_norm / n
        for name, t in self.params.items():
            if not t.requires_grad:
                continue
            v = self.velocity.get(name)
            g = t.grad * DTYPE(scale)
            v = g if v is None else DTYPE(self.momentum) * v + g
            self.velocity[name] = v
            t.data = (t.data - DTYPE(self.lr) * v).astype(DTYPE)
        self.params.zero_grad()


def finite_diff_check(f: Callable[[], Tensor], params: list[Tensor], h: float = 1e-3,
                      max_entries: int = 40, rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients with central differences.

    ``f`` rebuilds the scalar loss from the current values of ``params``.
    The numeric side runs the whole forward pass in float64, for up to
    ``max_entries`` randomly chosen coordinates per tensor. Returns the largest relative error, with
    the denominator floored so near-zero gradients are compared absolutely.
    """
    from .autodiff import backward, precision

    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    backward(f())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        base = p.data.copy()
        saved = [q.data for q in params]
        with precision(np.float64):
            for q in params:
                q.data = q.data.astype(np.float64)
            for j, i in enumerate(idx):
                vals = []
                for sign in (1.0, -1.0):
                    d = base.astype(np.float64).reshape(-1)
                    d[i] += sign * h
                    p.data = d.reshape(base.shape)
                    vals.append(float(f().data))
                numeric[j] = (vals[0] - vals[1]) / (2 * h)
        for q, s in zip(params, saved):
            q.data = s
        a = analytic.reshape(-1)[idx].astype(np.float64)
        scale = max(np.abs(numeric).max(), np.abs(a).max(), 1e-2)
        worst = max(worst, float(np.abs(a - numeric).max() / scale))
    return worst


def save_params(params: ParamStore, directory, prefix: str = "param"):
    """Write one volume file per entry plus ``manifest.json``."""
    from .data.io import write_volume
    from .volume import Volume

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, t) in enumerate(params.items()):
        fname = f"{prefix}{i:04d}.vuda"
        write_volume(directory / fname, Volume(t.data.reshape(1, 1, 1, -1)))
        entries.append({"name": name, "shape": list(t.data.shape), "trainable": t.requires_grad, "file": fname})
    (directory / "manifest.json").write_text(json.dumps({"params": entries}, indent=1))


def load_params(directory) -> ParamStore:
    from .data.io import read_volume

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    store = ParamStore()
    for e in manifest["params"]:
        v = read_volume(directory / e["file"])
        store.add(e["name"], v.data.reshape(e["shape"]), trainable=e["trainable"])
    return store
