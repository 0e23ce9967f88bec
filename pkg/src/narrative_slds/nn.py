"""Small parameter containers built on :mod:`narrative_slds.tensor`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """Collects ``Tensor`` parameters and sub-modules from instance attributes.

    Naming is dotted by attribute, in attribute insertion order, so two modules
    built with the same constructor arguments enumerate identical names.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{key}.{i}", item

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for n, p in params.items():
            if n in state:
                if state[n].shape != p.shape:
                    raise ValueError(f"{n}: stored shape {state[n].shape} != {p.shape}")
                p.data = np.array(state[n], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        scale = 0.0 if zero else 1.0 / np.sqrt(max(n_in, 1))
        self.W = param(rng.uniform(-scale, scale, size=(n_in, n_out)) if scale else np.zeros((n_in, n_out)))
        self.b = param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator):
        self.table = param(rng.normal(0.0, 0.1, size=(n, dim)))

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.shape[0]):
            raise IndexError(f"token id out of range [0, {self.table.shape[0]})")
        return self.table[ids]


class GRUCell(Module):
    """Single gated recurrent cell; gate order in the fused weights is (reset, update, candidate)."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        s = 1.0 / np.sqrt(hidden)
        self.hidden = hidden
        self.W_x = param(rng.uniform(-s, s, size=(n_in, 3 * hidden)))
        self.W_h = param(rng.uniform(-s, s, size=(hidden, 3 * hidden)))
        self.b_x = param(np.zeros(3 * hidden))
        self.b_h = param(np.zeros(3 * hidden))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return self.step(x @ self.W_x + self.b_x, h)

    def step(self, gx: Tensor, h: Tensor) -> Tensor:
        """Advance one step given the already-projected input ``gx = x W_x + b_x``."""
        n = self.hidden
        gh = h @ self.W_h + self.b_h
        r = T.sigmoid(gx[..., :n] + gh[..., :n])
        u = T.sigmoid(gx[..., n:2 * n] + gh[..., n:2 * n])
        c = T.tanh(gx[..., 2 * n:] + r * gh[..., 2 * n:])
        return c + u * (h - c)


def masked_update(new: Tensor, old: Tensor, mask: np.ndarray) -> Tensor:
    """Keep ``old`` where ``mask`` (shape ``(B,)``) is 0; ``mask`` is a constant."""
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64)[:, None], new.shape)
    if m.all():
        return new
    return new * m + old * (1.0 - m)
