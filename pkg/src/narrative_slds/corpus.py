"""Stories, vocabulary, corpus files, splits and the synthetic SLDS corpus."""
from __future__ import annotations

import csv
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, EOS, BOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<eos>", "<bos>")
MISSING = "__MISSING__"

_TOKEN_RE = re.compile(r"<\w+>|\w+(?:'\w+)*|[^\w\s]")
_LABELS_RE = re.compile(r"^(NEG|NEU|POS)(,(NEG|NEU|POS))*$")


def tokenize(text: str) -> list[str]:
    """Lowercase, then split words from punctuation; ``<tag>`` symbols stay whole."""
    return _TOKEN_RE.findall(text.lower())


class CorpusError(ValueError):
    pass


@dataclass
class Story:
    sentences: list[list[int]]
    labels: list[int] | None = None
    id: str = ""
    latents: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.sentences:
            raise CorpusError(f"story {self.id!r} has no sentences")
        if self.labels is not None and len(self.labels) != len(self.sentences):
            raise CorpusError(
                f"story {self.id!r}: {len(self.labels)} labels for {len(self.sentences)} sentences"
            )

    def __len__(self) -> int:
        return len(self.sentences)

    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


class Vocabulary:
    def __init__(self, tokens: Sequence[str], freqs: dict[str, int] | None = None, cutoff: int = 0):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.freqs = dict(freqs or {})
        self.cutoff = cutoff

    def __len__(self) -> int:
        return len(self.itos)

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]], cutoff: int = 5) -> Vocabulary:
        """Keep tokens seen at least ``cutoff`` times, most frequent first (ties alphabetical)."""
        counts = Counter(t for toks in token_lists for t in toks)
        kept = sorted((t for t, c in counts.items() if c >= cutoff and t not in RESERVED),
                      key=lambda t: (-counts[t], t))
        return cls(kept, dict(counts), cutoff)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens] + [EOS]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids if i not in (EOS, PAD, BOS)]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocabulary:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != RESERVED:
            raise CorpusError(f"{path}: vocabulary must start with the reserved symbols {RESERVED}")
        return cls(lines[4:])


# ------------------------------------------------------------------ file I/O


@dataclass
class RawStory:
    sentences: list[str]
    labels: list[int] | None = None
    id: str = ""


def read_stories(path, n_sentences: int | None = None) -> list[RawStory]:
    """Parse a ``stories.tsv`` file: tab-separated sentences, optional trailing label field."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            labels = None
            if len(fields) > 1 and _LABELS_RE.match(fields[-1].strip()):
                codes = fields.pop().strip().split(",")
                labels = [("NEG", "NEU", "POS").index(c) for c in codes]
            if any(not f.strip() for f in fields):
                raise CorpusError(f"{path}:{lineno}: empty sentence field")
            if labels is not None and len(labels) != len(fields):
                raise CorpusError(
                    f"{path}:{lineno}: {len(labels)} labels for {len(fields)} sentences"
                )
            if n_sentences is not None and len(fields) != n_sentences:
                raise CorpusError(
                    f"{path}:{lineno}: expected {n_sentences} sentences, found {len(fields)}"
                )
            out.append(RawStory(fields, labels, f"{Path(path).stem}:{lineno}"))
    return out


def encode_stories(raw: Sequence[RawStory], vocab: Vocabulary, lexicon=None,
                   retag: bool = False) -> list[Story]:
    from .scaffold import tag_sentence

    stories = []
    for r in raw:
        toks = [tokenize(s) for s in r.sentences]
        labels = r.labels
        if lexicon is not None and (retag or labels is None):
            labels = [int(tag_sentence(lexicon, t)[0]) for t in toks]
        stories.append(Story([vocab.encode(t) for t in toks], labels, r.id))
    return stories


def load_corpus(path, vocab: Vocabulary | None = None, cutoff: int = 5, lexicon=None,
                n_sentences: int | None = None) -> tuple[list[Story], Vocabulary]:
    """Load and encode a corpus; builds the vocabulary from this file when none is given.

    With ``lexicon`` set, stories lacking inline labels are tagged sentence by sentence.
    """
    raw = read_stories(path, n_sentences)
    if not raw:
        raise CorpusError(f"{path}: no stories")
    if vocab is None:
        vocab = Vocabulary.build((tokenize(s) for r in raw for s in r.sentences), cutoff)
    return encode_stories(raw, vocab, lexicon), vocab


def story_text(story: Story, vocab: Vocabulary) -> list[str]:
    return [" ".join(vocab.decode(s)) for s in story.sentences]


def format_story_line(sentences: Sequence[str], labels: Sequence[int] | None = None) -> str:
    fields = [s.replace("\t", " ") for s in sentences]
    if labels is not None:
        fields.append(",".join(("NEG", "NEU", "POS")[int(l)] for l in labels))
    return "\t".join(fields)


def save_corpus(path, stories: Sequence[Story], vocab: Vocabulary, with_labels: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in stories:
            fh.write(format_story_line(story_text(s, vocab), s.labels if with_labels else None) + "\n")


def import_rocstories(csv_path, out_path) -> int:
    """Convert the ROCStories CSV layout (``sentence1`` … ``sentence5`` columns) to ``stories.tsv``."""
    n = 0
    with open(csv_path, newline="", encoding="utf-8") as fh, open(out_path, "w", encoding="utf-8") as out:
        reader = csv.DictReader(fh)
        cols = [c for c in (reader.fieldnames or []) if re.fullmatch(r"sentence\d+", c or "", re.I)]
        if not cols:
            raise CorpusError(f"{csv_path}: no sentenceN columns in header {reader.fieldnames}")
        cols.sort(key=lambda c: int(re.sub(r"\D", "", c)))
        for lineno, row in enumerate(reader, 2):
            sents = [(row.get(c) or "").strip() for c in cols]
            if any(not s for s in sents):
                raise CorpusError(f"{csv_path}:{lineno}: missing sentence")
            out.write(format_story_line(sents) + "\n")
            n += 1
    return n


def split(corpus: Sequence, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle deterministically and cut into (train, valid, test)."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1: {fractions}")
    n = len(corpus)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fr[0] * n))
    n_valid = min(int(round(fr[1] * n)), n - n_train)
    parts = np.split(order, [n_train, n_train + n_valid])
    return tuple([corpus[i] for i in p] for p in parts)


# ------------------------------------------------------------------ synthetic

SUBJECTS = ("tom", "anna", "max", "lily")
VERBS = ("walked", "cooked", "played", "worked")
OBJECTS = ("home", "outside", "downtown", "upstairs")
SENTIMENT_WORDS = (
    ("sad", "awful", "terrible", "angry"),  # negative
    ("then", "later", "again", "today"),  # neutral
    ("happy", "great", "wonderful", "glad"),  # positive
)
FILLERS = ("the", "a", "and", "so")


@dataclass
class SyntheticSpec:
    """Parameters of a true SLDS whose latents emit short template sentences.

    Coordinates ``0..K-1`` of the latent carry the sentiment: the emitted
    sentiment word's class is ``argmax z[:K]``.  Coordinates 3..7 pick the
    subject, verb, object and word variant by their signs.
    """

    A: np.ndarray  # (K, d, d)
    b: np.ndarray  # (K, d)
    noise: np.ndarray  # (K, d) std of diagonal transition noise
    initial: np.ndarray  # (K,)
    transition: np.ndarray  # (K, K)
    z0_scale: float = 1.0
    token_noise: float = 0.05
    n_sentences: int = 5

    @property
    def K(self) -> int:
        return self.initial.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    def words(self) -> list[str]:
        ws = list(SUBJECTS) + list(VERBS) + list(OBJECTS) + list(FILLERS)
        for cls in SENTIMENT_WORDS:
            ws.extend(cls)
        return ws

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.words())

    def emit(self, z: np.ndarray, rng: np.random.Generator) -> list[str]:
        K = self.K
        bit = lambda j: int(z[j] > 0)  # noqa: E731
        cls = int(np.argmax(z[:K])) if K > 1 else 0
        if K == 1:
            cls = 1
        toks = [
            SUBJECTS[2 * bit(3) + bit(4)],
            VERBS[2 * bit(5) + bit(6)],
            OBJECTS[2 * bit(7) + bit(4)],
            SENTIMENT_WORDS[cls][2 * bit(6) + bit(3)],
        ]
        for i in range(len(toks)):
            if rng.random() < self.token_noise:
                toks[i] = FILLERS[rng.integers(len(FILLERS))]
        return toks


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    """Left eigenvector of a row-stochastic matrix for eigenvalue 1."""
    w, v = np.linalg.eig(np.asarray(transition, dtype=np.float64).T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    return pi / pi.sum()


def default_synthetic_spec(K: int = 3) -> SyntheticSpec:
    """Three sentiment regimes with regime-specific rotations of the topic block."""
    d = 8
    if K not in (1, 3):
        raise ValueError("default synthetic spec supports K in {1, 3}")
    topic = np.eye(5) * 0.95
    neg = topic.copy()
    neg[0, 0] = neg[2, 2] = -0.95  # flips subject and verb bits
    pos = topic.copy()
    pos[[1, 3]] = pos[[3, 1]]  # swaps two topic coordinates
    A = np.zeros((3, d, d))
    b = np.zeros((3, d))
    for k, blk in enumerate((neg, topic, pos)):
        A[k, :3, :3] = 0.2 * np.eye(3)
        A[k, 3:, 3:] = blk
        b[k, k] = 2.0
    noise = np.tile(np.r_[np.full(3, 0.5), np.full(5, 0.3)], (3, 1))
    transition = np.array([[0.5, 0.3, 0.2], [0.25, 0.5, 0.25], [0.2, 0.3, 0.5]])
    initial = stationary_distribution(transition)
    if K == 1:
        return SyntheticSpec(A[1:2], b[1:2] * 0, noise[1:2], np.ones(1), np.ones((1, 1)))
    return SyntheticSpec(A, b, noise, initial, transition)


def sample_synthetic(spec: SyntheticSpec, n_stories: int, rng: np.random.Generator):
    """Sample text stories, true states and latents (``z[0]`` is the pre-story latent)."""
    texts, states, latents = [], [], []
    for _ in range(n_stories):
        z = np.zeros(spec.d)
        z[3:] = spec.z0_scale * rng.standard_normal(spec.d - 3)
        zs, ss, sents = [z], [], []
        s = int(rng.choice(spec.K, p=spec.initial))
        for i in range(spec.n_sentences):
            if i:
                s = int(rng.choice(spec.K, p=spec.transition[s]))
            z = spec.A[s] @ z + spec.b[s] + spec.noise[s] * rng.standard_normal(spec.d)
            zs.append(z)
            ss.append(s)
            sents.append(spec.emit(z, rng))
        texts.append(sents)
        states.append(ss)
        latents.append(np.array(zs))
    return texts, states, latents


def generate_synthetic_corpus(spec: SyntheticSpec, n_stories: int, rng: np.random.Generator,
                              prefix: str = "synth") -> list[Story]:
    """Stories drawn from ``spec``; labels are the true switching states."""
    vocab = spec.vocabulary()
    texts, states, latents = sample_synthetic(spec, n_stories, rng)
    return [
        Story([vocab.encode(s) for s in t], list(st), f"{prefix}-{i:06d}", lat)
        for i, (t, st, lat) in enumerate(zip(texts, states, latents))
    ]
