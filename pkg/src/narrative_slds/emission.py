"""Emission models: a latent-conditioned GRU language model and a linear-Gaussian oracle."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import BOS, EOS, PAD
from .gaussian import Gaussian, log_pdf
from .nn import Embedding, GRUCell, Linear, Module, masked_update
from .tensor import Tensor


def pad_batch(sentences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in sentences], dtype=np.int64)
    out = np.full((len(sentences), max(int(lengths.max()), 1)), PAD, dtype=np.int64)
    for i, s in enumerate(sentences):
        out[i, :len(s)] = s
    return out, lengths


class GruLm(Module):
    """Token-level GRU language model conditioned on a latent vector.

    The latent enters twice: it is mixed with the carried context into the
    sentence's initial hidden state, and it is appended to every token
    embedding.  With ``latent_dim == 0`` this is a plain story-level LM whose
    hidden state simply carries across sentence boundaries.
    """

    def __init__(self, vocab_size: int, embed_dim: int, hidden: int, latent_dim: int,
                 rng: np.random.Generator):
        self.V, self.e, self.h, self.d = vocab_size, embed_dim, hidden, latent_dim
        # the input table always has a row for <bos>, even for toy output vocabularies
        self.emb = Embedding(max(vocab_size, BOS + 1), embed_dim, rng)
        self.cell = GRUCell(embed_dim + latent_dim, hidden, rng)
        if latent_dim:
            self.init = Linear(hidden + latent_dim, hidden, rng)
        self.out = Linear(hidden, vocab_size, rng)

    def initial_context(self, n: int = 1) -> np.ndarray:
        return np.zeros((n, self.h))

    def _start(self, z: Tensor | None, carry: Tensor) -> tuple[Tensor, Tensor | None]:
        """Initial hidden state and the per-step latent input projection."""
        if not self.d:
            return carry, None
        h0 = T.tanh(self.init(T.concat([carry, z], axis=-1)))
        gz = z @ self.cell.W_x[self.e:] + self.cell.b_x
        return h0, gz

    def teacher_force(self, z: Tensor | None, carry, tokens: np.ndarray, lengths: np.ndarray,
                      return_steps: bool = False):
        """Log-probability of padded token rows ``(B, L)`` (each ending in eos).

        Returns ``(logp (B,), new_carry (B, h))``; with ``return_steps`` also the
        ``(B, L)`` per-token log-probabilities (zero on padding).
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and tokens.max() >= self.V:
            raise ValueError(f"token id {int(tokens.max())} outside vocabulary of size {self.V}")
        n, L = tokens.shape
        carry = T.as_tensor(carry)
        inputs = np.concatenate([np.full((n, 1), BOS), tokens[:, :-1]], axis=1)
        mask = (np.arange(L)[None, :] < lengths[:, None]).astype(np.float64)
        h, gz = self._start(z, carry)
        ge = self.emb(inputs) @ self.cell.W_x[:self.e]
        if gz is None:
            ge = ge + self.cell.b_x
        states = []
        for t in range(L):
            gx = ge[:, t] if gz is None else ge[:, t] + gz
            h = masked_update(self.cell.step(gx, h), h, mask[:, t])
            states.append(h)
        H = T.stack(states, axis=1).reshape(n * L, self.h)
        logp = T.log_softmax(self.out(H), axis=-1)
        picked = T.gather(logp, tokens.reshape(-1)).reshape(n, L) * mask
        total = picked.sum(axis=1)
        if return_steps:
            return total, h, picked
        return total, h

    def step_logits(self, token: np.ndarray, gz, h):
        gx = self.emb(token) @ self.cell.W_x[:self.e]
        gx = gx + self.cell.b_x if gz is None else gx + gz
        h = self.cell.step(gx, h)
        return self.out(h), h

    def generate(self, z, carry, max_len: int, k: int | None = None,
                 rng: np.random.Generator | None = None) -> tuple[list[list[int]], np.ndarray]:
        """Batched decoding; ``k=None`` is greedy, otherwise top-k sampling.

        Ties in the greedy argmax go to the lowest token id.  A sentence that
        reaches ``max_len`` has eos forced at its last position.
        """
        if max_len < 1:
            raise ValueError("max_len must be at least 1")
        with T.no_grad():
            carry = T.as_tensor(np.atleast_2d(carry))
            n = carry.shape[0]
            zt = None if z is None or not self.d else T.as_tensor(np.atleast_2d(z))
            h, gz = self._start(zt, carry)
            token = np.full(n, BOS)
            done = np.zeros(n, dtype=bool)
            out: list[list[int]] = [[] for _ in range(n)]
            final = np.array(h.data)
            for t in range(max_len):
                logits, h = self.step_logits(token, gz, h)
                if t == max_len - 1:
                    choice = np.full(n, EOS)
                elif k is None:
                    choice = np.argmax(logits.data, axis=-1)
                else:
                    choice = _topk_choice(logits.data, k, rng)
                for i in np.flatnonzero(~done):
                    out[i].append(int(choice[i]))
                live = ~done
                final[live] = h.data[live]
                done |= choice == EOS
                if done.all():
                    break
                token = np.where(done, EOS, choice)
        return out, final


def _topk_choice(logits: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    V = logits.shape[-1]
    if not 1 <= k <= V:
        raise ValueError(f"k must lie in [1, {V}]")
    order = np.argsort(-logits, axis=-1, kind="stable")[:, :k]
    top = np.take_along_axis(logits, order, axis=-1)
    p = np.exp(top - top.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    u = rng.random((logits.shape[0], 1))
    idx = np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), k - 1)
    return order[np.arange(logits.shape[0]), idx]


# ------------------------------------------------------------ single-story API


def _latent(lm: GruLm, z):
    if not lm.d:
        return None
    return T.as_tensor(np.atleast_2d(np.asarray(z, dtype=np.float64)))


def sentence_log_prob(lm: GruLm, z, context_state, tokens: Sequence[int]) -> tuple[float, np.ndarray]:
    """log P(tokens | z, context); returns the value and the context after the sentence."""
    tokens = list(tokens)
    if not tokens or tokens[-1] != EOS:
        raise ValueError("sentence must end with the eos id")
    with T.no_grad():
        arr, lengths = pad_batch([tokens])
        lp, h = lm.teacher_force(_latent(lm, z), np.atleast_2d(context_state), arr, lengths)
    return float(lp.data[0]), h.data[0].copy()


def consume(lm: GruLm, z, context_state, tokens: Sequence[int]) -> np.ndarray:
    return sentence_log_prob(lm, z, context_state, tokens)[1]


def greedy_decode(lm: GruLm, z, context_state, max_len: int) -> list[int]:
    out, _ = lm.generate(None if z is None else np.atleast_2d(z), np.atleast_2d(context_state), max_len)
    return out[0]


def topk_sample(lm: GruLm, z, context_state, k: int, rng: np.random.Generator, max_len: int) -> list[int]:
    if not 1 <= k <= lm.V:
        raise ValueError(f"k must lie in [1, {lm.V}]")
    if k == 1:
        return greedy_decode(lm, z, context_state, max_len)
    out, _ = lm.generate(None if z is None else np.atleast_2d(z), np.atleast_2d(context_state),
                         max_len, k=k, rng=rng)
    return out[0]


# -------------------------------------------------------------- linear-Gaussian


@dataclass
class LinearGaussianEmission:
    """x = C z + R η, η ~ N(0, I); ``R`` lower triangular with positive diagonal."""

    C: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        m = self.C.shape[0]
        if self.R.shape != (m, m) or np.any(np.diag(self.R) <= 0) or np.any(np.triu(self.R, 1)):
            raise ValueError("R must be an m x m lower-triangular factor with positive diagonal")

    def distribution(self, z) -> Gaussian:
        return Gaussian(self.C @ np.asarray(z, dtype=np.float64), self.R)

    def log_prob_tensor(self, z: Tensor, x) -> Tensor:
        """Differentiable log N(x; C z, R Rᵀ) for a ``(d,)`` tensor ``z``."""
        x = np.asarray(x, dtype=np.float64)
        m = self.C.shape[0]
        resid = T.as_tensor(x) - T.matmul(self.C, z)
        white = T.solve_lower(self.R, resid.reshape(m, 1))
        const = -0.5 * m * np.log(2 * np.pi) - np.sum(np.log(np.diag(self.R)))
        return (white * white).sum() * -0.5 + const


def linear_gaussian_log_prob(em: LinearGaussianEmission, z, x) -> float:
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if z.shape[0] != em.C.shape[1] or x.shape[0] != em.C.shape[0]:
        raise ValueError(f"dimension mismatch: C {em.C.shape}, z {z.shape}, x {x.shape}")
    return log_pdf(em.distribution(z), x)
