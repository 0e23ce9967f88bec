"""Metrics and experiment drivers."""
from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .corpus import EOS, Story, Vocabulary
from .emission import pad_batch
from .gibbs import MASKS, baseline_interpolate, interpolate, mask_task
from .inference import LanguageModel, SldsModel, _batches, classify_s
from .scaffold import Sentiment, SentimentLexicon, tag_sentence


@dataclass
class MetricReport:
    name: str
    per_story: dict[str, list[float]] = field(default_factory=dict)
    aggregate: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.aggregate.items():
            if not math.isfinite(v):
                raise ValueError(f"{self.name}: non-finite aggregate {k}={v}")

    def to_kv(self) -> str:
        lines = [f"metric={self.name}"]
        lines += [f"{k}={v:.6f}" for k, v in self.aggregate.items()]
        lines += [f"config.{k}={v}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        keys = list(self.aggregate)
        width = max([len(k) for k in keys] + [6])
        rows = [f"{self.name}", f"{'key':<{width}}  value", "-" * (width + 14)]
        rows += [f"{k:<{width}}  {self.aggregate[k]:12.4f}" for k in keys]
        return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------- ROUGE


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _lcs(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _prf(overlap: float, n_cand: int, n_ref: int) -> tuple[float, float, float]:
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def rouge(candidate: Sequence, reference: Sequence, variant="1") -> tuple[float, float, float]:
    """(precision, recall, F1) for ROUGE-1, ROUGE-2 or ROUGE-L."""
    variant = str(variant).upper()
    if not reference:
        raise ValueError("rouge needs a non-empty reference")
    if not candidate:
        return 0.0, 0.0, 0.0
    if variant == "L":
        return _prf(_lcs(candidate, reference), len(candidate), len(reference))
    if variant not in ("1", "2"):
        raise ValueError(f"unknown ROUGE variant {variant!r}")
    n = int(variant)
    c, r = _ngrams(candidate, n), _ngrams(reference, n)
    overlap = sum(min(v, r[g]) for g, v in c.items())
    return _prf(overlap, sum(c.values()), sum(r.values()))


# ----------------------------------------------------------- likelihood


def nll_ppl(model, stories: Sequence[Story], mc_samples: int = 1, rng: np.random.Generator | None = None,
            batch_size: int = 64) -> MetricReport:
    """Per-story NLL and per-token perplexity (eos tokens counted).

    Latent models report the negative ELBO with discrete state draws,
    averaged over ``mc_samples``; the story LM is exact.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    nll = np.zeros(len(stories))
    exact = isinstance(model, LanguageModel)
    reps = 1 if exact else mc_samples
    with T.no_grad():
        for _ in range(reps):
            for idx in _batches(stories, batch_size, None):
                batch = [stories[i] for i in idx]
                res = model.batch_objective(batch, np.zeros(len(batch)), rng, hard=True)
                nll[idx] -= res.elbo / reps
    ntok = sum(s.n_tokens() for s in stories)
    ppl = math.exp(nll.sum() / ntok)
    return MetricReport("nll_ppl", {"nll": nll.tolist()},
                        {"nll": float(nll.mean()), "ppl": ppl, "tokens": float(ntok)},
                        {"model": getattr(model, "kind", "?"), "mc_samples": reps, "stories": len(stories)})


# ------------------------------------------------------ sentiment control


def macro_f1(gold: Sequence[int], pred: Sequence[int], labels: Sequence[int] = (0, 1, 2)) -> tuple[float, dict]:
    """Mean per-class F1 over the classes present in ``gold`` or ``pred``."""
    gold, pred = np.asarray(gold), np.asarray(pred)
    per = {}
    for c in labels:
        tp = int(np.sum((gold == c) & (pred == c)))
        fp = int(np.sum((gold != c) & (pred == c)))
        fn = int(np.sum((gold == c) & (pred != c)))
        if tp + fp + fn:
            per[c] = 2 * tp / (2 * tp + fp + fn)
    return (float(np.mean(list(per.values()))) if per else 0.0), per


def generate_from_tags(model: SldsModel, tag_sequences: Sequence[Sequence[int]], rng: np.random.Generator,
                       max_len: int | None = None) -> list[list[list[int]]]:
    """Ancestral Z under the tagged dynamics, greedy sentences given each Z_i."""
    max_len = max_len or model.config.max_sentence_len
    A, b, B = model.dyn.numpy_params()
    out: list[list[list[int]]] = [[] for _ in tag_sequences]
    by_len: dict[int, list[int]] = {}
    for j, tags in enumerate(tag_sequences):
        by_len.setdefault(len(tags), []).append(j)
    for N, rows in sorted(by_len.items()):
        tags = np.array([tag_sequences[j] for j in rows], dtype=np.int64)
        n = len(rows)
        z = np.tile(model.initial_latent, (n, 1))
        carry = model.lm.initial_context(n)
        for i in range(N):
            s = tags[:, i]
            eps = rng.standard_normal((n, model.d))
            z = np.einsum("nij,nj->ni", A[s], z) + b[s] + np.einsum("nij,nj->ni", B[s], eps)
            sents, _ = model.lm.generate(z, carry, max_len)
            with T.no_grad():
                toks, lens = pad_batch(sents)
                _, h = model.lm.teacher_force(T.Tensor(z), carry, toks, lens)
            carry = h.data
            for r, j in enumerate(rows):
                out[j].append(sents[r])
    return out


def sentiment_control_f1(generator, tag_sequences: Sequence[Sequence[int]], lexicon: SentimentLexicon,
                         vocab: Vocabulary, rng: np.random.Generator) -> MetricReport:
    """Generate stories from tag sequences, re-tag them, and score macro-F1.

    ``generator`` is an ``SldsModel`` or a callable ``(tag_sequences, rng) ->
    stories`` (each story a list of token-id sentences).
    """
    if isinstance(generator, SldsModel):
        stories = generate_from_tags(generator, tag_sequences, rng)
    else:
        stories = generator(tag_sequences, rng)
    gold, pred = [], []
    for tags, story in zip(tag_sequences, stories):
        for t, sent in zip(tags, story):
            gold.append(int(t))
            pred.append(int(tag_sentence(lexicon, vocab.decode(sent))[0]))
    f1, per = macro_f1(gold, pred)
    agg = {"macro_f1": f1}
    agg.update({f"f1.{Sentiment(c).code}": v for c, v in per.items()})
    return MetricReport("sentiment_control", {"gold": gold, "pred": pred}, agg,
                        {"stories": len(tag_sequences)})


# ------------------------------------------------------------ benchmark

Runner = Callable[[Story, str, np.random.Generator], list]


def scaffold_for(model, story: Story) -> list[int]:
    """Semi-noisy tags: argmax of q(S_i | X) on the full story."""
    if not isinstance(model, SldsModel) or model.K == 1:
        return [0] * len(story)
    return [int(np.argmax(p)) for p in classify_s(model, story)]


def runner_for(model, samples: int = 50, burn_in: int = 25, baseline_samples: int = 1000,
               topk: int = 15) -> Runner:
    """Interpolation procedure matching the model family.

    The switching model runs the Gibbs sampler on its inferred scaffold; the
    single-state model and the story LM use best-of-N top-k sampling.
    """
    gibbs = isinstance(model, SldsModel) and model.kind == "slds"

    def run(story: Story, regime: str, rng: np.random.Generator) -> list:
        task = mask_task(story, regime, scaffold_for(model, story), samples, burn_in)
        if gibbs:
            return interpolate(task, model, rng)[0]
        return baseline_interpolate(task, model, baseline_samples, topk, rng).sentences

    return run


def _strip(sent: Sequence[int]) -> list[int]:
    return [t for t in sent if t != EOS]


def interpolation_benchmark(runners: dict[str, Runner], stories: Sequence[Story],
                            regimes: Sequence[str] = tuple(MASKS), seed: int = 0,
                            threads: int = 1) -> MetricReport:
    """ROUGE F1 of the filled-in sentences against the held-out ones.

    The missing sentences of a task are concatenated (in order) into one
    candidate and one reference.  Every (model, regime, story) cell draws
    from its own seed, so results do not depend on ``threads``.
    """
    per: dict[str, list[float]] = {}
    agg: dict[str, float] = {}
    for name, run in runners.items():
        for r_idx, regime in enumerate(regimes):
            hide = MASKS[regime]

            def one(j: int, run=run, regime=regime, hide=hide, r_idx=r_idx):
                rng = np.random.default_rng(np.random.SeedSequence([seed, r_idx, j]))
                filled = run(stories[j], regime, rng)
                cand = [t for i in hide for t in _strip(filled[i])]
                ref = [t for i in hide for t in _strip(stories[j].sentences[i])]
                return [rouge(cand, ref, v)[2] for v in ("1", "2", "L")]

            if threads > 1:
                with ThreadPoolExecutor(threads) as pool:
                    scores = list(pool.map(one, range(len(stories))))
            else:
                scores = [one(j) for j in range(len(stories))]
            scores = np.array(scores).reshape(-1, 3)
            for v, col in zip(("rouge1", "rouge2", "rougeL"), scores.T):
                key = f"{name}.{regime}.{v}"
                per[key] = col.tolist()
                agg[key] = float(col.mean()) if len(col) else 0.0
    return MetricReport("interpolation", per, agg, {"regimes": ",".join(regimes), "stories": len(stories),
                                                    "seed": seed})
