"""Recognition networks, evidence lower bounds and the training loop.

The approximate posterior factorizes per sentence into a classifier
q(S_i | X) and a diagonal Gaussian q(Z_i | Z_{i-1}, S_i, X_{:i}, X_i).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import Config
from .corpus import Story, Vocabulary
from .dynamics import DynamicsSet, gumbel_softmax_sample, sample_gumbel
from .emission import GruLm, pad_batch
from .gaussian import Gaussian
from .nn import Embedding, GRUCell, Linear, Module, masked_update, param
from .scaffold import MarkovPrior, fit_markov_prior
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def _diag_embed(v: Tensor, d: int) -> Tensor:
    sel = np.zeros((d, d * d))
    sel[np.arange(d), np.arange(d) * (d + 1)] = 1.0
    return (v @ sel).reshape(v.shape[0], d, d)


def gaussian_kl_tensor(mu_q: Tensor, logvar_q: Tensor, mu_p: Tensor, factor_p: Tensor) -> Tensor:
    """KL(N(mu_q, diag exp(logvar_q)) || N(mu_p, L Lᵀ)) per batch row, ``(B,)``."""
    n, d = mu_q.shape
    std = T.exp(logvar_q * 0.5)
    M = T.solve_lower(factor_p, _diag_embed(std, d))
    diff = T.solve_lower(factor_p, (mu_p - mu_q).reshape(n, d, 1))
    logdet_p = T.log(T.diagonal(factor_p)).sum(axis=1) * 2.0
    trace = (M * M).sum(axis=(1, 2))
    maha = (diff * diff).sum(axis=(1, 2))
    return (trace + maha - d + logdet_p - logvar_q.sum(axis=1)) * 0.5


class RecognitionNets(Module):
    """Sentence encoder, running context, classifier head and posterior head.

    With ``story_context`` the classifier also reads the sentences before
    and after sentence i (a forward and a backward GRU over encodings);
    otherwise it sees sentence i alone.
    """

    def __init__(self, vocab_size: int, embed_dim: int, hidden: int, latent_dim: int, K: int,
                 rng: np.random.Generator, story_context: bool = False):
        self.H, self.d, self.K = hidden, latent_dim, K
        self.story_context = story_context and K > 1
        self.emb = Embedding(vocab_size, embed_dim, rng)
        self.enc = GRUCell(embed_dim, hidden, rng)
        self.ctx = GRUCell(hidden, hidden, rng)
        self.cls = Linear(hidden * (3 if self.story_context else 1), K, rng) if K > 1 else None
        if self.story_context:
            self.bctx = GRUCell(hidden, hidden, rng)
        self.post = Linear(latent_dim + K + 2 * hidden, hidden, rng)
        self.post_mu = Linear(hidden, latent_dim, rng)
        self.post_logvar = Linear(hidden, latent_dim, rng, zero=True)

    def encode(self, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Final GRU state over each padded sentence row, ``(M, H)``."""
        n, L = tokens.shape
        mask = (np.arange(L)[None, :] < lengths[:, None]).astype(np.float64)
        gx = self.emb(tokens) @ self.enc.W_x + self.enc.b_x
        h = T.Tensor(np.zeros((n, self.H)))
        for t in range(L):
            h = masked_update(self.enc.step(gx[:, t], h), h, mask[:, t])
        return h

    def contexts(self, enc: Tensor) -> list[Tensor]:
        """Running encodings of X_{:i}: ``ctx[i]`` has seen sentences ``0..i-1``."""
        n, N, _ = enc.shape
        c = T.Tensor(np.zeros((n, self.H)))
        out = [c]
        for i in range(N - 1):
            c = self.ctx(enc[:, i], c)
            out.append(c)
        return out

    def backward_contexts(self, enc: Tensor) -> list[Tensor]:
        """``out[i]`` has seen sentences ``i+1..N-1`` (read from the end)."""
        n, N, _ = enc.shape
        c = T.Tensor(np.zeros((n, self.H)))
        out = [c]
        for i in range(N - 1, 0, -1):
            c = self.bctx(enc[:, i], c)
            out.append(c)
        return out[::-1]

    def state_logits(self, enc: Tensor, ctx: list[Tensor] | None = None) -> Tensor:
        """Classifier logits ``(n, N, K)`` for encodings ``(n, N, H)``."""
        if self.cls is None:
            return T.Tensor(np.zeros(enc.shape[:-1] + (1,)))
        if not self.story_context:
            return self.cls(enc)
        fwd = T.stack(ctx if ctx is not None else self.contexts(enc), axis=1)
        bwd = T.stack(self.backward_contexts(enc), axis=1)
        return self.cls(T.concat([enc, fwd, bwd], axis=-1))

    def posterior(self, z_prev: Tensor, weights: Tensor, ctx: Tensor, sent: Tensor):
        hid = T.tanh(self.post(T.concat([z_prev, weights, ctx, sent], axis=-1)))
        return self.post_mu(hid), self.post_logvar(hid)


@dataclass
class ElboReport:
    reconstruction: float
    kl_z: float
    kl_s: float
    supervision: float
    elbo: float
    n_tokens: int = 0


@dataclass
class BatchResult:
    loss: Tensor
    reconstruction: np.ndarray
    kl_z: np.ndarray
    kl_s: np.ndarray
    supervision: np.ndarray
    n_tokens: np.ndarray

    @property
    def elbo(self) -> np.ndarray:
        return self.reconstruction - self.kl_z - self.kl_s

    def report(self, i: int) -> ElboReport:
        return ElboReport(float(self.reconstruction[i]), float(self.kl_z[i]), float(self.kl_s[i]),
                          float(self.supervision[i]), float(self.elbo[i]), int(self.n_tokens[i]))


class SldsModel(Module):
    """Switching (or, with one state, plain) linear dynamical system over sentences."""

    def __init__(self, config: Config, vocab_size: int, prior: MarkovPrior | None = None,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.config = config
        K, d = config.n_states, config.latent_dim
        self.K, self.d, self.V = K, d, vocab_size
        self.prior = prior or MarkovPrior.uniform(K)
        self.dyn = DynamicsSet(K, d, rng)
        self.z0 = param(np.zeros(d))
        self.lm = GruLm(vocab_size, config.embed_dim, config.hidden, d, rng)
        self.rec = RecognitionNets(vocab_size, config.embed_dim, config.enc_hidden, d, K, rng,
                                   story_context=config.state_context)

    kind = property(lambda self: self.config.model)

    # ------------------------------------------------------------ batched ELBO

    def batch_objective(
        self,
        stories: Sequence[Story],
        supervised: np.ndarray,
        rng: np.random.Generator,
        kl_weight: float = 1.0,
        hard: bool = False,
        noise: dict | None = None,
    ) -> BatchResult:
        """Single-sample objective for stories of equal length.

        Supervised rows select dynamics with their gold labels and add
        Σ log q(S_i = gold); the other rows draw relaxed Gumbel-Softmax
        weights (or, with ``hard``, one-hot categorical draws) and pay the
        categorical KL to the scaffold prior.  ``noise`` may pin the Gumbel
        and Gaussian draws (keys ``gumbel`` and ``eps``) for gradient checks.
        """
        cfg = self.config
        n, N = len(stories), len(stories[0])
        if any(len(s) != N for s in stories):
            raise ValueError("batch_objective needs stories of equal sentence count")
        K, d = self.K, self.d
        sup = np.asarray(supervised, dtype=np.float64)
        if K == 1:
            sup = np.zeros(n)  # nothing to supervise without a switch
        if np.any(sup > 0) and any(s.labels is None for s, m in zip(stories, sup) if m):
            raise ValueError("supervised rows need gold labels")

        flat = [s.sentences[i] for s in stories for i in range(N)]
        toks, lens = pad_batch(flat)
        enc = self.rec.encode(toks, lens).reshape(n, N, self.rec.H)
        ctx = self.rec.contexts(enc)
        logits = self.rec.state_logits(enc, ctx)  # (n, N, K)
        logq = T.log_softmax(logits, axis=-1)
        q = T.exp(logq)

        gold = np.zeros((n, N, K))
        for r, s in enumerate(stories):
            if sup[r] and s.labels is not None:
                gold[r, np.arange(N), s.labels] = 1.0
        sup3 = np.broadcast_to(sup[:, None, None], (n, N, K))
        if hard:
            draws = np.zeros((n, N, K))
            qd = q.data
            for r in range(n):
                for i in range(N):
                    draws[r, i, rng.choice(K, p=qd[r, i] / qd[r, i].sum())] = 1.0
            weights = T.Tensor(gold * sup3 + draws * (1.0 - sup3))
        elif K == 1:
            weights = T.Tensor(np.ones((n, N, 1)))
        else:
            g = noise["gumbel"] if noise and "gumbel" in noise else sample_gumbel((n, N, K), rng)
            soft = gumbel_softmax_sample(logits, cfg.temperature, noise=g)
            weights = soft * (1.0 - sup3) + gold * sup3

        eps = noise["eps"] if noise and "eps" in noise else rng.standard_normal((N, n, d))
        z_prev = self.z0 + np.zeros((n, d))
        kl_z = T.Tensor(np.zeros(n))
        zs = []
        for i in range(N):
            w_i = weights[:, i]
            A, b, Bf = self.dyn.mix(w_i)
            prior_mean = (A @ z_prev.reshape(n, d, 1)).reshape(n, d) + b
            mu, logvar = self.rec.posterior(z_prev, w_i, ctx[i], enc[:, i])
            z = mu + T.exp(logvar * 0.5) * eps[i]
            kl_z = kl_z + gaussian_kl_tensor(mu, logvar, prior_mean, Bf)
            zs.append(z)
            z_prev = z

        kl_s = T.Tensor(np.zeros(n))
        if K > 1:
            logT = np.log(self.prior.transition)
            for i in range(N):
                if i == 0:
                    logp = T.Tensor(np.broadcast_to(np.log(self.prior.initial), (n, K)).copy())
                else:
                    logp = T.log(weights[:, i - 1] @ self.prior.transition) if not hard else \
                        T.Tensor(weights.data[:, i - 1] @ logT)
                kl_s = kl_s + (q[:, i] * (logq[:, i] - logp)).sum(axis=1)
            kl_s = kl_s * (1.0 - sup)

        recon = T.Tensor(np.zeros(n))
        carry = self.lm.initial_context(n)
        for i in range(N):
            t_i, l_i = pad_batch([s.sentences[i] for s in stories])
            lp, carry = self.lm.teacher_force(zs[i], carry, t_i, l_i)
            recon = recon + lp

        supervision = T.Tensor(np.zeros(n))
        if np.any(sup):
            supervision = (logq * gold).sum(axis=(1, 2)) * sup

        objective = recon - (kl_z + kl_s) * kl_weight + supervision * cfg.supervision_weight
        loss = objective.sum() * (-1.0 / n)
        ntok = np.array([s.n_tokens() for s in stories])
        res = BatchResult(loss, recon.data.copy(), kl_z.data.copy(), kl_s.data.copy(),
                          supervision.data.copy(), ntok)
        if not np.all(np.isfinite(res.elbo)) or not np.isfinite(loss.data):
            bad = int(np.flatnonzero(~np.isfinite(res.elbo))[0]) if not np.all(np.isfinite(res.elbo)) else 0
            raise TrainingError(f"non-finite objective: {res.report(bad)}")
        return res

    # ----------------------------------------------------------- single story

    def classify_s(self, story: Story) -> list[np.ndarray]:
        return classify_s(self, story)

    def recognition_features(self, sentences: Sequence[Sequence[int]]):
        """Sentence encodings and running contexts as numpy arrays ``(N, H)``."""
        with T.no_grad():
            toks, lens = pad_batch(sentences)
            enc = self.rec.encode(toks, lens).reshape(1, len(sentences), self.rec.H)
            ctx = self.rec.contexts(enc)
        return enc.data[0], np.stack([c.data[0] for c in ctx])

    def posterior_z(self, z_prev, weights, context_enc, sent_enc) -> Gaussian:
        w = np.zeros(self.K)
        if np.ndim(weights) == 0:
            w[int(weights)] = 1.0
        else:
            w = np.asarray(weights, dtype=np.float64)
        with T.no_grad():
            mu, logvar = self.rec.posterior(
                T.Tensor(np.atleast_2d(z_prev)), T.Tensor(w[None]),
                T.Tensor(np.atleast_2d(context_enc)), T.Tensor(np.atleast_2d(sent_enc)),
            )
        return Gaussian.diagonal(mu.data[0], np.exp(logvar.data[0]))

    # Gibbs protocol -------------------------------------------------------

    @property
    def initial_latent(self) -> np.ndarray:
        return self.z0.data.copy()

    def dynamics_params(self, state: int):
        A, b, B = self.dyn.numpy_params()
        return A[state], b[state], B[state]

    def z_posterior_at(self, sentences, i: int, z_prev, state: int, features=None) -> Gaussian:
        enc, ctx = features if features is not None else self.recognition_features(sentences[:i + 1])
        return self.posterior_z(z_prev, state, ctx[i], enc[i])

    def context_before(self, zs, sentences, i: int) -> np.ndarray:
        carry = self.lm.initial_context(1)
        with T.no_grad():
            for j in range(i):
                toks, lens = pad_batch([sentences[j]])
                _, h = self.lm.teacher_force(T.Tensor(np.atleast_2d(zs[j])), carry, toks, lens)
                carry = h.data
        return carry

    def fill(self, zs, sentences, i: int) -> list[int]:
        carry = self.context_before(zs, sentences, i)
        out, _ = self.lm.generate(np.atleast_2d(zs[i]), carry, self.config.max_sentence_len)
        return out[0]

    def observed_score(self, zs, sentences, observed) -> float:
        total = 0.0
        carry = self.lm.initial_context(1)
        with T.no_grad():
            for j, s in enumerate(sentences):
                toks, lens = pad_batch([s])
                lp, h = self.lm.teacher_force(T.Tensor(np.atleast_2d(zs[j])), carry, toks, lens)
                carry = h.data
                if observed[j]:
                    total += float(lp.data[0])
        return total


class LanguageModel(Module):
    """Latent-free story LM baseline (hidden state carried across sentences)."""

    def __init__(self, config: Config, vocab_size: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.config = config
        self.V = vocab_size
        self.lm = GruLm(vocab_size, config.embed_dim, config.hidden, 0, rng)

    kind = property(lambda self: "lm")

    def batch_objective(self, stories, supervised=None, rng=None, kl_weight=1.0, hard=False,
                        noise=None) -> BatchResult:
        n, N = len(stories), len(stories[0])
        recon = T.Tensor(np.zeros(n))
        carry = self.lm.initial_context(n)
        for i in range(N):
            t_i, l_i = pad_batch([s.sentences[i] for s in stories])
            lp, carry = self.lm.teacher_force(None, carry, t_i, l_i)
            recon = recon + lp
        zeros = np.zeros(n)
        ntok = np.array([s.n_tokens() for s in stories])
        res = BatchResult(recon.sum() * (-1.0 / n), recon.data.copy(), zeros, zeros, zeros, ntok)
        if not np.isfinite(res.loss.data):
            raise TrainingError("non-finite language-model loss")
        return res

    def story_log_probs(self, sentences) -> list[float]:
        out, carry = [], self.lm.initial_context(1)
        with T.no_grad():
            for s in sentences:
                toks, lens = pad_batch([s])
                lp, h = self.lm.teacher_force(None, carry, toks, lens)
                carry = h.data
                out.append(float(lp.data[0]))
        return out


# --------------------------------------------------------------- public ops


def classify_s(model: SldsModel, story: Story) -> list[np.ndarray]:
    """q(S_i | X) per sentence."""
    with T.no_grad():
        toks, lens = pad_batch(story.sentences)
        enc = model.rec.encode(toks, lens).reshape(1, len(story), model.rec.H)
        probs = T.softmax(model.rec.state_logits(enc), axis=-1).data[0]
    return [p for p in probs]


def posterior_z(model: SldsModel, z_prev, state, context_enc, sent_enc) -> Gaussian:
    return model.posterior_z(z_prev, state, context_enc, sent_enc)


def elbo_unsupervised(model, story: Story, rng: np.random.Generator, hard: bool = False) -> ElboReport:
    with T.no_grad():
        res = model.batch_objective([story], np.zeros(1), rng, hard=hard)
    return res.report(0)


def elbo_supervised(model, story: Story, gold_labels: Sequence[int], rng: np.random.Generator) -> ElboReport:
    if len(gold_labels) != len(story):
        raise ValueError(f"{len(gold_labels)} labels for {len(story)} sentences")
    s = Story(story.sentences, list(gold_labels), story.id)
    with T.no_grad():
        res = model.batch_objective([s], np.ones(1), rng)
    return res.report(0)


def build_model(config: Config, vocab_size: int, prior: MarkovPrior | None = None,
                rng: np.random.Generator | None = None):
    if config.model == "lm":
        return LanguageModel(config, vocab_size, rng)
    return SldsModel(config, vocab_size, prior, rng)


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    seconds: float
    checkpoint: str | None = None


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    labeled_ids: list[str] = field(default_factory=list)


def choose_labeled(stories: Sequence[Story], fraction: float, seed: int) -> set[str]:
    """Ids of the stories that keep their labels (a seeded random subset)."""
    with_labels = [s.id for s in stories if s.labels is not None]
    if fraction >= 1.0:
        return set(with_labels)
    n = int(round(fraction * len(with_labels)))
    rng = np.random.default_rng([seed, 104729])
    return set(rng.choice(with_labels, size=n, replace=False).tolist()) if n else set()


def _batches(stories: Sequence[Story], batch_size: int, rng: np.random.Generator | None):
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(stories):
        by_len.setdefault(len(s), []).append(i)
    out = []
    for _, idx in sorted(by_len.items()):
        idx = np.array(idx)
        if rng is not None:
            idx = idx[rng.permutation(len(idx))]
        out.extend(idx[j:j + batch_size] for j in range(0, len(idx), batch_size))
    if rng is not None:
        out = [out[i] for i in rng.permutation(len(out))]
    return out


def evaluate_objective(model, stories: Sequence[Story], supervised: set[str], seed: int,
                       batch_size: int = 64) -> float:
    """Mean per-story loss with a fixed noise stream (comparable across epochs)."""
    rng = np.random.default_rng([seed, 7])
    total, n = 0.0, 0
    with T.no_grad():
        for idx in _batches(stories, batch_size, None):
            batch = [stories[i] for i in idx]
            sup = np.array([s.id in supervised for s in batch], dtype=float)
            res = model.batch_objective(batch, sup, rng)
            total += float(res.loss.data) * len(batch)
            n += len(batch)
    return total / max(n, 1)


def train(
    model,
    train_stories: Sequence[Story],
    valid_stories: Sequence[Story],
    config: Config | None = None,
    checkpoint_dir: str | Path | None = None,
    vocab: Vocabulary | None = None,
    callback: Callable[[EpochRecord], None] | None = None,
) -> TrainHistory:
    """Adam training with early stopping on the validation objective.

    Stories in the labeled subset (``config.label_fraction``) use the
    supervised objective, the rest the unsupervised one.  The scaffold prior
    of an SLDS is re-fit from the labeled subset before training.  The best
    epoch's parameters are restored at the end.
    """
    cfg = config or model.config
    if not train_stories:
        raise TrainingError("empty training corpus")
    rng = np.random.default_rng([cfg.seed, 1])
    labeled = choose_labeled(train_stories, cfg.label_fraction if cfg.model == "slds" else 0.0, cfg.seed)
    if isinstance(model, SldsModel) and model.K > 1 and labeled:
        model.prior = fit_markov_prior(
            (s.labels for s in train_stories if s.id in labeled), K=model.K
        )
    valid_sup = {s.id for s in valid_stories if s.labels is not None} if labeled else set()
    params = model.parameters()
    opt = T.Adam(params, lr=cfg.lr)
    history = TrainHistory(labeled_ids=sorted(labeled))
    best, best_state, bad_epochs, step = math.inf, model.state_dict(), 0, 0
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    n_batches = len(_batches(train_stories, cfg.batch_size, None))
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        tot, cnt = 0.0, 0
        for idx in _batches(train_stories, cfg.batch_size, rng):
            batch = [train_stories[i] for i in idx]
            sup = np.array([s.id in labeled for s in batch], dtype=float)
            beta = min(1.0, (step + 1) / n_batches) if cfg.kl_warmup else 1.0
            opt.zero_grad()
            res = model.batch_objective(batch, sup, rng, kl_weight=beta)
            T.backward(res.loss)
            T.clip_grad_norm(params.values(), cfg.clip_norm)
            opt.step()
            step += 1
            tot += float(res.loss.data) * len(batch)
            cnt += len(batch)
        valid = evaluate_objective(model, valid_stories, valid_sup, cfg.seed) if valid_stories else tot / cnt
        rec = EpochRecord(epoch, tot / cnt, valid, time.perf_counter() - t0)
        if ckdir:
            from .checkpoint import save_model

            path = ckdir / f"epoch-{epoch:03d}.ckpt"
            save_model(path, model, vocab, {"epoch": epoch, "train_loss": rec.train_loss,
                                            "valid_loss": valid})
            rec.checkpoint = str(path)
        history.epochs.append(rec)
        log.info("epoch %d train %.4f valid %.4f (%.1fs)", epoch, rec.train_loss, valid, rec.seconds)
        if callback:
            callback(rec)
        if valid < best - 1e-9:
            best, best_state, bad_epochs = valid, model.state_dict(), 0
            history.best_epoch = epoch
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    model.load_state_dict(best_state)
    if ckdir:
        from .checkpoint import save_model

        save_model(ckdir / "best.ckpt", model, vocab, {"epoch": history.best_epoch, "valid_loss": best})
    return history
