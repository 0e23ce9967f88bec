"""K switching linear-Gaussian transitions z_i = A_s z_{i-1} + b_s + B_s ε."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .gaussian import Gaussian
from .nn import Module, param
from .tensor import Tensor


class DynamicsSet(Module):
    """Learned (A_k, b_k, B_k) for k < K.

    B_k is assembled from a strictly-lower block plus ``exp`` of a diagonal
    log-scale, so every factor stays lower triangular with positive diagonal.
    """

    def __init__(self, K: int, d: int, rng: np.random.Generator, init_scale: float = 1.0):
        self.K, self.d = K, d
        self.A = param(0.9 * np.eye(d)[None].repeat(K, 0) + 0.01 * rng.standard_normal((K, d, d)))
        self.b = param(np.zeros((K, d)))
        self.B_lower = param(np.zeros((K, d, d)))
        self.B_logdiag = param(np.full((K, d), np.log(init_scale)))
        sel = np.zeros((d, d * d))
        sel[np.arange(d), np.arange(d) * (d + 1)] = 1.0
        self._diag_selector = sel

    def named_parameters(self, prefix: str = ""):
        # checkpoint names follow dyn.A.k / dyn.b.k / dyn.B.k only at save time;
        # the live tensors are stacked over k
        yield prefix + "A", self.A
        yield prefix + "b", self.b
        yield prefix + "B_lower", self.B_lower
        yield prefix + "B_logdiag", self.B_logdiag

    # ----------------------------------------------------------- tensor views

    def factors(self) -> Tensor:
        """All K factors as a ``(K, d, d)`` tensor."""
        diag = (T.exp(self.B_logdiag) @ self._diag_selector).reshape(self.K, self.d, self.d)
        return T.tril_mask(self.B_lower, -1) + diag

    def mix(self, weights: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Convex combinations for a batch of simplex ``weights`` ``(B, K)``.

        Returns ``A (B,d,d)``, ``b (B,d)`` and the mixed factor ``(B,d,d)``.
        """
        K, d = self.K, self.d
        n = weights.shape[0]
        A = (weights @ self.A.reshape(K, d * d)).reshape(n, d, d)
        b = weights @ self.b
        B = (weights @ self.factors().reshape(K, d * d)).reshape(n, d, d)
        return A, b, B

    # ------------------------------------------------------------ numpy views

    def numpy_params(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        with T.no_grad():
            return self.A.data, self.b.data, self.factors().data

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        A, b, B = self.numpy_params()
        out = {}
        for k in range(self.K):
            out[f"dyn.A.{k}"] = A[k]
            out[f"dyn.b.{k}"] = b[k]
            out[f"dyn.B.{k}"] = B[k]
        return out


def transition_distribution(dyn: DynamicsSet, z_prev, state: int) -> Gaussian:
    state = int(state)
    if not 0 <= state < dyn.K:
        raise ValueError(f"state {state} outside [0, {dyn.K})")
    A, b, B = dyn.numpy_params()
    return Gaussian(A[state] @ np.asarray(z_prev, dtype=np.float64) + b[state], B[state])


def soft_transition_distribution(dyn: DynamicsSet, z_prev, weights) -> Gaussian:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (dyn.K,):
        raise ValueError(f"weights shape {w.shape}, expected ({dyn.K},)")
    if np.any(w < 0):
        raise ValueError("soft transition weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"soft transition weights sum to {w.sum()}, not 1")
    A, b, B = dyn.numpy_params()
    A_mix = np.tensordot(w, A, axes=1)
    b_mix = w @ b
    B_mix = np.tensordot(w, B, axes=1)
    return Gaussian(A_mix @ np.asarray(z_prev, dtype=np.float64) + b_mix, B_mix)


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(np.finfo(float).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(logits, temperature: float, rng: np.random.Generator | None = None,
                          noise: np.ndarray | None = None):
    """softmax((logits + g) / temperature) with g ~ Gumbel(0, 1).

    Accepts a ``Tensor`` (result is differentiable w.r.t. it) or an array.
    ``noise`` pins g, which is how gradient checks hold the sample fixed.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    shape = logits.shape
    g = sample_gumbel(shape, rng) if noise is None else np.asarray(noise, dtype=np.float64)
    if isinstance(logits, Tensor):
        return T.softmax((logits + g) * (1.0 / temperature), axis=-1)
    x = (np.asarray(logits, dtype=np.float64) + g) / temperature
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)
