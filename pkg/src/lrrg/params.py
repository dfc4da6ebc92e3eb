"""Named trainable tensors, seeded initialisation and the AdamW optimiser."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from .tensor import Tensor, get_default_dtype

# Branch tags stripped from init keys when branches are mirror-initialised, so
# e.g. "prior.stage1.conv_a.weight" and "current.stage1.conv_a.weight" draw
# identical starting values while keeping separate storage.
_MIRROR_TAGS = (("prior.", "branch."), ("current.", "branch."), ("_prior.", "_branch."), ("_cur.", "_branch."))


class ParameterStore:
    """Ordered mapping from dotted names to trainable leaf tensors.

    Each parameter is initialised from its own RNG stream derived from
    ``(seed, name)``, so values do not depend on creation order.
    """

    def __init__(self, seed: int = 0, dtype=None, mirror_branches: bool = True):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
        self.mirror_branches = mirror_branches
        self._params: dict[str, Tensor] = {}

    def _rng(self, name: str) -> np.random.Generator:
        key = name
        if self.mirror_branches:
            for tag, repl in _MIRROR_TAGS:
                key = key.replace(tag, repl)
        return np.random.default_rng([self.seed, zlib.crc32(key.encode())])

    def create(self, name: str, shape, init: str = "zeros", fan_in: int | None = None,
               gain: float = 1.0, value: float = 0.0) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "constant":
            data = np.full(shape, value)
        elif init == "he":
            fan = fan_in if fan_in is not None else int(np.prod(shape[1:]))
            data = self._rng(name).standard_normal(shape) * gain * np.sqrt(2.0 / fan)
        elif init == "xavier":
            fan = fan_in if fan_in is not None else int(np.prod(shape[1:]))
            fan_out = shape[0]
            bound = gain * np.sqrt(6.0 / (fan + fan_out))
            data = self._rng(name).uniform(-bound, bound, size=shape)
        elif init == "normal":
            data = self._rng(name).standard_normal(shape) * gain
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, t in self._params.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)


class AdamW:
    """Adam with decoupled weight decay applied to every parameter."""

    def __init__(self, store: ParameterStore, lr: float = 5e-5, weight_decay: float = 0.05,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data *= 1 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.asarray(self.t)}
        for n in self.m:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for n in self.m:
            self.m[n] = np.array(state[f"m.{n}"])
            self.v[n] = np.array(state[f"v.{n}"])
