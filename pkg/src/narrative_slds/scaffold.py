"""Discrete switching labels: the Markov scaffold prior and a lexicon sentiment tagger."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class Sentiment(enum.IntEnum):
    NEGATIVE = 0
    NEUTRAL = 1
    POSITIVE = 2

    @property
    def code(self) -> str:
        return ("NEG", "NEU", "POS")[self.value]

    @classmethod
    def from_code(cls, code: str) -> Sentiment:
        try:
            return cls(("NEG", "NEU", "POS").index(code.strip().upper()))
        except ValueError:
            raise ValueError(f"unknown sentiment code {code!r}") from None


LABEL_CODES = ("NEG", "NEU", "POS")


@dataclass
class MarkovPrior:
    transition: np.ndarray  # K x K, rows sum to one
    initial: np.ndarray  # K

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        K = self.initial.shape[0]
        if self.transition.shape != (K, K):
            raise ValueError(f"transition shape {self.transition.shape} does not match K={K}")
        if not np.allclose(self.transition.sum(1), 1.0, atol=1e-12) or not np.isclose(
            self.initial.sum(), 1.0, atol=1e-12
        ):
            raise ValueError("MarkovPrior rows must sum to one")

    @property
    def K(self) -> int:
        return self.initial.shape[0]

    @classmethod
    def uniform(cls, K: int) -> MarkovPrior:
        return cls(np.full((K, K), 1.0 / K), np.full(K, 1.0 / K))

    def sample(self, n: int, rng: np.random.Generator) -> list[int]:
        s = [int(rng.choice(self.K, p=self.initial))]
        for _ in range(n - 1):
            s.append(int(rng.choice(self.K, p=self.transition[s[-1]])))
        return s


def fit_markov_prior(label_sequences: Iterable[Sequence[int]], K: int = 3, smoothing: float = 1.0) -> MarkovPrior:
    """Add-``smoothing`` count estimate of the initial distribution and transition matrix."""
    counts = np.zeros((K, K))
    first = np.zeros(K)
    n = 0
    for seq in label_sequences:
        seq = [int(s) for s in seq]
        if not seq:
            continue
        if any(s < 0 or s >= K for s in seq):
            raise ValueError(f"label outside [0, {K}) in {seq}")
        n += 1
        first[seq[0]] += 1
        for a, b in zip(seq[:-1], seq[1:]):
            counts[a, b] += 1
    if n == 0:
        raise ValueError("fit_markov_prior: empty labeled corpus")
    trans = (counts + smoothing) / (counts.sum(1, keepdims=True) + smoothing * K)
    init = (first + smoothing) / (first.sum() + smoothing * K)
    return MarkovPrior(trans, init)


def log_prior(prior: MarkovPrior, labels: Sequence[int]) -> float:
    if len(labels) == 0:
        raise ValueError("log_prior: empty label sequence")
    lp = math.log(prior.initial[labels[0]])
    for a, b in zip(labels[:-1], labels[1:]):
        lp += math.log(prior.transition[a, b])
    return lp


# ---------------------------------------------------------------------- tagger

NEGATION_SCALAR = -0.74
BOOSTER_INCREMENT = 0.293
COMPOUND_ALPHA = 15.0

DEFAULT_NEGATIONS = frozenset(
    "not no never none nobody nothing neither nor nowhere cannot can't don't doesn't didn't "
    "isn't wasn't aren't weren't won't wouldn't shouldn't couldn't without n't".split()
)
DEFAULT_INTENSIFIERS = {
    **{w: BOOSTER_INCREMENT for w in (
        "very really extremely so too totally absolutely completely incredibly "
        "super quite especially truly deeply highly"
    ).split()},
    **{w: -BOOSTER_INCREMENT for w in "barely hardly slightly somewhat kinda almost".split()},
}


@dataclass
class SentimentLexicon:
    scores: dict[str, float]
    negations: frozenset = DEFAULT_NEGATIONS
    intensifiers: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_INTENSIFIERS))
    pos_threshold: float = 0.05
    neg_threshold: float = -0.05

    def __post_init__(self):
        for tok, s in self.scores.items():
            if not -4.0 <= s <= 4.0:
                raise ValueError(f"lexicon score for {tok!r} outside [-4, 4]: {s}")


def load_lexicon(path: str | Path | None = None, **kwargs) -> SentimentLexicon:
    """Read ``token<TAB>score`` lines (``#`` comments allowed); default is the bundled list."""
    if path is None:
        text = resources.files("narrative_slds").joinpath("data/lexicon.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    scores = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise ValueError(f"lexicon line {lineno}: expected token<TAB>score, got {line!r}")
        scores[parts[0].strip().lower()] = float(parts[1])
    return SentimentLexicon(scores, **kwargs)


def sentence_valence(lex: SentimentLexicon, tokens: Sequence[str]) -> float:
    total = 0.0
    for i, tok in enumerate(tokens):
        s = lex.scores.get(tok, 0.0)
        if s == 0.0:
            continue
        prev = tokens[max(0, i - 3):i]
        if prev and prev[-1] in lex.intensifiers:
            s += math.copysign(lex.intensifiers[prev[-1]], s)
        if any(p in lex.negations for p in prev):
            s *= NEGATION_SCALAR
        total += s
    return total


def compound_score(valence: float, alpha: float = COMPOUND_ALPHA) -> float:
    return valence / math.sqrt(valence * valence + alpha)


def bucket(lex: SentimentLexicon, compound: float) -> Sentiment:
    if compound >= lex.pos_threshold:
        return Sentiment.POSITIVE
    if compound <= lex.neg_threshold:
        return Sentiment.NEGATIVE
    return Sentiment.NEUTRAL


def tag_sentence(lex: SentimentLexicon, tokens: Sequence[str]) -> tuple[Sentiment, float]:
    """Label a tokenized sentence; unknown tokens contribute nothing."""
    c = compound_score(sentence_valence(lex, [t.lower() for t in tokens]))
    return bucket(lex, c), c
