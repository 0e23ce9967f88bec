"""Gibbs interpolation: fill missing sentences given clamped ones and a scaffold.

A sampler model exposes

* ``initial_latent`` (the pre-story latent),
* ``dynamics_params(state) -> (A, b, B)`` with ``B`` a lower Cholesky factor,
* ``recognition_features(sentences)`` (anything ``z_posterior_at`` accepts),
* ``z_posterior_at(sentences, i, z_prev, state, features) -> Gaussian``,
* ``fill(zs, sentences, i)`` returning the greedy value of sentence ``i``,
* ``observed_score(zs, sentences, observed)``.

Both the neural model and the linear-Gaussian model in ``lgssm`` qualify.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import tensor as T
from .corpus import MISSING, Story, Vocabulary, tokenize
from .emission import pad_batch
from .gaussian import Gaussian, gibbs_z_conditional, sample
from .scaffold import Sentiment


@dataclass
class InterpolationTask:
    sentences: list  # observed values; entries at missing positions are ignored
    observed: list[bool]
    scaffold: list[int]
    samples: int = 50
    burn_in: int = 25
    seed: int = 0
    id: str = ""
    reference: list | None = None

    def __post_init__(self):
        n = len(self.sentences)
        if len(self.observed) != n:
            raise ValueError(f"mask has {len(self.observed)} entries for {n} sentences")
        if len(self.scaffold) != n:
            raise ValueError(f"scaffold has {len(self.scaffold)} labels for {n} sentences")
        if not any(self.observed):
            raise ValueError("an interpolation task needs at least one observed sentence")
        if not 0 <= self.burn_in < self.samples:
            raise ValueError("need 0 <= burn_in < samples")

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def missing(self) -> list[int]:
        return [i for i, o in enumerate(self.observed) if not o]


@dataclass
class ChainState:
    z: list[np.ndarray]
    x: list
    score: float


@dataclass
class Diagnostics:
    trace: list[float]
    initial_score: float
    best_sweep: int  # 0 is the initialization, k >= 1 the k-th sweep
    best_score: float


MASKS = {
    "2nd": (1,),
    "4th": (3,),
    "1st+2nd": (0, 1),
    "3rd+4th": (2, 3),
}


def mask_task(story: Story, regime: str | Sequence[int], scaffold: Sequence[int],
              samples: int = 50, burn_in: int = 25, seed: int = 0) -> InterpolationTask:
    """Task hiding the positions named by ``regime`` (a key of ``MASKS`` or indices)."""
    hide = MASKS[regime] if isinstance(regime, str) else tuple(regime)
    observed = [i not in hide for i in range(len(story))]
    return InterpolationTask(
        [list(s) for s in story.sentences], observed, [int(s) for s in scaffold],
        samples, burn_in, seed, story.id, [list(s) for s in story.sentences],
    )


# ---------------------------------------------------------------- the chain


def _copy(x):
    return x.copy() if isinstance(x, np.ndarray) else list(x) if x is not None else None


def check_scaffold(task: InterpolationTask, model) -> None:
    K = getattr(model, "K", None)
    if K is not None and any(not 0 <= s < K for s in task.scaffold):
        raise ValueError(f"task {task.id or '?'}: scaffold {task.scaffold} has labels outside 0..{K - 1}")


def initialize(task: InterpolationTask, model, rng: np.random.Generator) -> ChainState:
    """Ascending pass: q_Z at observed positions, the prior elsewhere, greedy X."""
    check_scaffold(task, model)
    xs = [_copy(x) if o else None for x, o in zip(task.sentences, task.observed)]
    zs: list[np.ndarray] = []
    z_prev = model.initial_latent
    for i in range(len(task)):
        s = task.scaffold[i]
        if task.observed[i]:
            dist = model.z_posterior_at(xs, i, z_prev, s, model.recognition_features(xs[:i + 1]))
        else:
            A, b, B = model.dynamics_params(s)
            dist = Gaussian(A @ z_prev + b, B)
        zs.append(sample(dist, rng))
        if not task.observed[i]:
            xs[i] = model.fill(zs, xs, i)
        z_prev = zs[i]
    return ChainState(zs, xs, model.observed_score(zs, xs, task.observed))


def z_conditional(state: ChainState, task: InterpolationTask, model, i: int, features=None) -> Gaussian:
    """The distribution a sweep draws Z_i from, given the other latents."""
    z_prev = model.initial_latent if i == 0 else state.z[i - 1]
    if features is None:
        features = model.recognition_features(state.x)
    q = model.z_posterior_at(state.x, i, z_prev, task.scaffold[i], features)
    if i == len(task) - 1:
        return q
    A, b, B = model.dynamics_params(task.scaffold[i + 1])
    return gibbs_z_conditional(A, B, state.z[i + 1], q, bias=b)


def sweep(state: ChainState, task: InterpolationTask, model, rng: np.random.Generator) -> ChainState:
    """Resample every Z_i in ascending order, then regenerate missing X greedily."""
    zs = [z.copy() for z in state.z]
    xs = [_copy(x) for x in state.x]
    cur = ChainState(zs, xs, state.score)
    features = model.recognition_features(xs)
    for i in range(len(task)):
        zs[i] = sample(z_conditional(cur, task, model, i, features), rng)
    for i in task.missing:
        xs[i] = model.fill(zs, xs, i)
    cur.score = model.observed_score(zs, xs, task.observed)
    return cur


def interpolate(task: InterpolationTask, model, rng: np.random.Generator | None = None):
    """Run ``task.samples`` sweeps and keep the filled story that best explains the clamps.

    Returns ``(sentences, Diagnostics)``.  The score trace holds the sweeps
    after burn-in; the initialization also competes in the selection, so the
    chosen score is never below the initial one.
    """
    rng = rng if rng is not None else np.random.default_rng(task.seed)
    state = initialize(task, model, rng)
    init_score = state.score
    best_x, best_score, best_k = [_copy(x) for x in state.x], state.score, 0
    trace = []
    for k in range(1, task.samples + 1):
        state = sweep(state, task, model, rng)
        if k > task.burn_in:
            trace.append(state.score)
            if state.score > best_score:
                best_x, best_score, best_k = [_copy(x) for x in state.x], state.score, k
    for i, o in enumerate(task.observed):
        if o:
            best_x[i] = _copy(task.sentences[i])
    return best_x, Diagnostics(trace, init_score, best_k, best_score)


# ---------------------------------------------------------------- baselines


@dataclass
class BaselineResult:
    sentences: list[list[int]]
    scores: np.ndarray  # clamped-sentence log-prob of every sample
    best: int


def baseline_interpolate(task: InterpolationTask, model, samples: int = 1000, k: int = 15,
                         rng: np.random.Generator | None = None, max_len: int | None = None) -> BaselineResult:
    """Best of ``samples`` top-k story completions, ranked by the clamped sentences.

    All samples are drawn in one batch.  For the story LM, observed sentences
    are teacher-forced and missing ones sampled.  For a latent model, Z_i is
    drawn from q_Z at observed positions and from the dynamics (under the
    task's scaffold) at missing ones, with sentences generated given Z_i.
    """
    rng = rng if rng is not None else np.random.default_rng(task.seed)
    max_len = max_len or model.config.max_sentence_len
    check_scaffold(task, model)
    S = samples
    lm = model.lm
    latent = getattr(model, "rec", None) is not None
    out: list[list[list[int]]] = [[] for _ in range(S)]
    scores = np.zeros(S)
    with T.no_grad():
        carry = lm.initial_context(S)
        if latent:
            rec = model.rec
            z_prev = np.tile(model.initial_latent, (S, 1))
            ctx = np.zeros((S, rec.H))
        for i in range(len(task)):
            obs = task.observed[i]
            z = None
            if latent:
                s = task.scaffold[i]
                if obs:
                    toks, lens = pad_batch([task.sentences[i]])
                    enc = np.repeat(rec.encode(toks, lens).data, S, axis=0)
                    w = np.zeros((S, model.K))
                    w[:, s] = 1.0
                    mu, logvar = rec.posterior(T.Tensor(z_prev), T.Tensor(w), T.Tensor(ctx), T.Tensor(enc))
                    z = mu.data + np.exp(0.5 * logvar.data) * rng.standard_normal(mu.shape)
                else:
                    A, b, B = model.dynamics_params(s)
                    z = z_prev @ A.T + b + rng.standard_normal((S, model.d)) @ B.T
            zt = T.Tensor(z) if z is not None else None
            if obs:
                sent = list(task.sentences[i])
                toks, lens = pad_batch([sent] * S)
                lp, h = lm.teacher_force(zt, carry, toks, lens)
                scores += lp.data
                carry = h.data
                for r in range(S):
                    out[r].append(list(sent))
            else:
                gen, carry = lm.generate(z, carry, max_len, k=k, rng=rng)
                for r in range(S):
                    out[r].append(gen[r])
            if latent:
                if not obs:
                    toks, lens = pad_batch([o[i] for o in out])
                    enc = rec.encode(toks, lens).data
                ctx = rec.ctx(T.Tensor(enc), T.Tensor(ctx)).data
                z_prev = z
    best = int(np.argmax(scores))
    return BaselineResult(out[best], scores, best)


# ---------------------------------------------------------------- task files


def read_tasks(path, vocab: Vocabulary, samples: int = 50, burn_in: int = 25) -> list[InterpolationTask]:
    """Parse a JSON-lines task file.

    Each record has ``sentences`` (text, with ``__MISSING__`` at the gaps) and
    optionally ``scaffold`` (``NEG``/``NEU``/``POS`` codes or ints), ``seed``,
    ``id`` and ``reference`` (the true sentences, for scoring).
    """
    tasks = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sents = rec["sentences"]
            observed = [s.strip() != MISSING for s in sents]
            enc = [vocab.encode(tokenize(s)) if o else [] for s, o in zip(sents, observed)]
            scaffold = [_label(v) for v in rec["scaffold"]] if rec.get("scaffold") else None
            ref = [vocab.encode(tokenize(s)) for s in rec["reference"]] if rec.get("reference") else None
            tasks.append(InterpolationTask(
                enc, observed, scaffold if scaffold is not None else [-1] * len(sents),
                int(rec.get("samples", samples)), int(rec.get("burn_in", burn_in)),
                int(rec.get("seed", 0)), str(rec.get("id", f"task{lineno}")), ref,
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad task record ({exc})") from None
    return tasks


def _label(v) -> int:
    return int(v) if isinstance(v, int) else int(Sentiment.from_code(str(v)))


def task_record(task: InterpolationTask, sentences: Sequence[Sequence[int]], vocab: Vocabulary,
                extra: dict[str, Any] | None = None) -> dict:
    rec = {
        "id": task.id,
        "sentences": [" ".join(vocab.decode(s)) for s in sentences],
        "observed": list(task.observed),
        "scaffold": [Sentiment(s).code for s in task.scaffold],
        "seed": task.seed,
    }
    rec.update(extra or {})
    return rec


def resolve_scaffold(task: InterpolationTask, model) -> InterpolationTask:
    """Fill unspecified (negative) scaffold labels from q(S | X) and the prior.

    Observed positions take the classifier's argmax; missing positions take
    the most likely successor of the previous label under the Markov prior.
    """
    if all(s >= 0 for s in task.scaffold):
        return task
    if model.K == 1:
        return _with_scaffold(task, [0] * len(task))
    from .inference import classify_s

    labels = []
    for i, s in enumerate(task.scaffold):
        if s >= 0:
            labels.append(int(s))
        elif task.observed[i]:
            probs = classify_s(model, Story([task.sentences[i]]))[0]
            labels.append(int(np.argmax(probs)))
        else:
            row = model.prior.initial if i == 0 else model.prior.transition[labels[-1]]
            labels.append(int(np.argmax(row)))
    return _with_scaffold(task, labels)


def _with_scaffold(task: InterpolationTask, labels: list[int]) -> InterpolationTask:
    return replace(task, scaffold=labels)
