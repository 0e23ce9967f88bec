"""Command-line interface: ``narrative-slds COMMAND [flags]``.

Commands: import, tag, train, sample, interpolate, evaluate, synth.  All
flags live on one parser so ``--help`` lists everything any command reads.
Configuration precedence is defaults < ``--config`` file < flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, check_compatible, load_model
from .config import Config, ConfigError, load_config
from .corpus import (CorpusError, Vocabulary, default_synthetic_spec, encode_stories,
                     format_story_line, generate_synthetic_corpus, import_rocstories, load_corpus,
                     read_stories, save_corpus, split, tokenize)
from .eval import interpolation_benchmark, nll_ppl, runner_for, sentiment_control_f1
from .gibbs import MASKS, baseline_interpolate, interpolate, read_tasks, resolve_scaffold, task_record
from .inference import SldsModel, build_model, train
from .scaffold import Sentiment, load_lexicon

COMMANDS = ("import", "tag", "train", "sample", "interpolate", "evaluate", "synth")
LABEL_PERCENTS = (1, 10, 25, 50, 100)

log = logging.getLogger("narrative_slds")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="narrative-slds",
        description="Switching linear dynamical system for stories: train, sample, interpolate, evaluate.",
    )
    p.add_argument("command", choices=COMMANDS)
    g = p.add_argument_group("common")
    g.add_argument("--config", help="key=value configuration file")
    g.add_argument("--model", choices=("slds", "lds", "lm"), help="model kind (train)")
    g.add_argument("--labels", type=int, choices=LABEL_PERCENTS,
                   help="percent of training stories keeping their labels (train)")
    g.add_argument("--seed", type=int, default=None, help="seed for every random choice")
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads for interpolate/evaluate (default: cores)")
    g.add_argument("--checkpoint", help="checkpoint file, or a directory holding best.ckpt "
                                        "(train writes into this directory)")
    g.add_argument("--out", help="output file (or directory for train)")
    g.add_argument("--samples", type=int, help="Gibbs sweeps per task, burn-in included")
    g.add_argument("--burn-in", type=int, dest="burn_in", help="Gibbs sweeps discarded before scoring")
    g.add_argument("--topk", type=int, help="top-k truncation for baseline sampling")
    c = p.add_argument_group("command inputs")
    c.add_argument("--corpus", help="stories.tsv input (tag, train, evaluate); CSV for import")
    c.add_argument("--tasks", help="JSON-lines task file (interpolate)")
    c.add_argument("--scaffold", help="comma-separated NEG/NEU/POS labels (sample)")
    c.add_argument("--n", type=int, default=10, help="stories to draw (sample, synth)")
    c.add_argument("--K", type=int, default=3, choices=(1, 3), help="states of the synthetic source (synth)")
    c.add_argument("--lexicon", help="token<TAB>score lexicon (tag, evaluate --control)")
    c.add_argument("--ppl", action="store_true", help="evaluate: NLL and perplexity")
    c.add_argument("--rouge", action="store_true", help="evaluate: interpolation ROUGE benchmark")
    c.add_argument("--control", action="store_true", help="evaluate: sentiment-control macro F1")
    c.add_argument("--regimes", default=",".join(MASKS),
                   help=f"evaluate --rouge masking regimes, from {','.join(MASKS)}")
    c.add_argument("--limit", type=int, help="use at most this many stories (evaluate)")
    c.add_argument("--verbose", action="store_true", help="log progress to stderr")
    return p


# ---------------------------------------------------------------- helpers


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    changes = {}
    if args.model:
        changes["model"] = args.model
    if args.labels is not None:
        changes["label_fraction"] = args.labels / 100.0
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.samples is not None:
        changes["samples"] = args.samples
    if args.burn_in is not None:
        changes["burn_in"] = args.burn_in
    if args.topk is not None:
        changes["topk"] = args.topk
    return cfg.replace(**changes) if changes else cfg


def _need(args, *names):
    for n in names:
        if getattr(args, n) in (None, ""):
            raise UsageError(f"{args.command} needs --{n.replace('_', '-')}")


def _exists(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {p}")
    return p


def _checkpoint_path(path) -> Path:
    p = _exists(path)
    return p / "best.ckpt" if p.is_dir() else p


def _load(args):
    """Load ``--checkpoint``; keys set by ``--config`` or ``--model`` must match it."""
    path = _checkpoint_path(args.checkpoint)
    model, vocab, meta = load_model(path)
    if args.config or args.model:
        expect = load_config(args.config, model.config) if args.config else model.config
        check_compatible(path, model.config, expect.replace(model=args.model) if args.model else expect)
    if vocab is None:
        raise CheckpointError(f"{path}: checkpoint has no vocabulary")
    return model, vocab


def _write(path, text: str) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _parse_scaffold(text: str) -> list[int]:
    try:
        return [int(Sentiment.from_code(c.strip())) for c in text.split(",") if c.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --scaffold: {exc}") from None


# ---------------------------------------------------------------- commands


def cmd_import(args) -> None:
    _need(args, "corpus", "out")
    n = import_rocstories(_exists(args.corpus), args.out)
    log.info("wrote %d stories to %s", n, args.out)


def cmd_tag(args) -> None:
    _need(args, "corpus", "out")
    lex = load_lexicon(args.lexicon)
    raw = read_stories(_exists(args.corpus))
    vocab = Vocabulary.build((tokenize(s) for r in raw for s in r.sentences), cutoff=0)
    stories = encode_stories(raw, vocab, lex, retag=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        for r, s in zip(raw, stories):
            fh.write(format_story_line(r.sentences, s.labels) + "\n")


def cmd_synth(args) -> None:
    _need(args, "out")
    seed = args.seed if args.seed is not None else 0
    spec = default_synthetic_spec(args.K)
    stories = generate_synthetic_corpus(spec, args.n, np.random.default_rng(seed))
    save_corpus(args.out, stories, spec.vocabulary(), with_labels=True)


def cmd_train(args) -> None:
    _need(args, "corpus", "checkpoint")
    cfg = _config(args)
    raw_path = _exists(args.corpus)
    stories, vocab = load_corpus(raw_path, cutoff=cfg.vocab_cutoff, n_sentences=cfg.n_sentences or None)
    train_s, valid_s, test_s = split(
        stories, (1.0 - cfg.valid_fraction - cfg.test_fraction, cfg.valid_fraction, cfg.test_fraction), cfg.seed
    )
    # Vocabulary from the training split only.
    raw = {r.id: r for r in read_stories(raw_path, cfg.n_sentences or None)}
    vocab = Vocabulary.build((tokenize(s) for st in train_s for s in raw[st.id].sentences), cfg.vocab_cutoff)
    enc = {s.id: s for s in encode_stories(list(raw.values()), vocab)}
    train_s, valid_s, test_s = ([enc[s.id] for s in part] for part in (train_s, valid_s, test_s))
    model = build_model(cfg, len(vocab))
    ckdir = Path(args.checkpoint)
    hist = train(model, train_s, valid_s, cfg, checkpoint_dir=ckdir, vocab=vocab)
    vocab.save(ckdir / "vocab.txt")
    for name, part in (("train", train_s), ("valid", valid_s), ("test", test_s)):
        save_corpus(ckdir / f"{name}.tsv", part, vocab)
    lines = [f"epoch={r.epoch} train_loss={r.train_loss:.6f} valid_loss={r.valid_loss:.6f}" for r in hist.epochs]
    lines.append(f"best_epoch={hist.best_epoch}")
    _write(args.out, "\n".join(lines) + "\n")


def cmd_sample(args) -> None:
    _need(args, "checkpoint", "scaffold")
    model, vocab = _load(args)
    if not isinstance(model, SldsModel):
        raise UsageError("sample needs a latent-variable checkpoint (slds or lds)")
    from .eval import generate_from_tags

    tags = _parse_scaffold(args.scaffold)
    if model.K == 1:
        tags_used = [[0] * len(tags)] * args.n
    else:
        if max(tags) >= model.K:
            raise UsageError(f"scaffold label outside the model's {model.K} states")
        tags_used = [tags] * args.n
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    stories = generate_from_tags(model, tags_used, rng)
    text = "".join(
        format_story_line([" ".join(vocab.decode(s)) for s in st], tags) + "\n" for st in stories
    )
    _write(args.out, text)


def cmd_interpolate(args) -> None:
    _need(args, "checkpoint", "tasks")
    model, vocab = _load(args)
    cfg = _config(args).replace(model=model.kind)
    tasks = read_tasks(_exists(args.tasks), vocab, cfg.samples, cfg.burn_in)
    seed = args.seed if args.seed is not None else 0

    def one(j: int) -> str:
        task = tasks[j]
        rng = np.random.default_rng(np.random.SeedSequence([seed, task.seed, j]))
        task = resolve_scaffold(task, model) if isinstance(model, SldsModel) else _zero_scaffold(task)
        if not task.missing:
            filled, extra = task.sentences, {}
        elif model.kind == "slds":
            filled, diag = interpolate(task, model, rng)
            extra = {"score": round(diag.best_score, 6), "best_sweep": diag.best_sweep}
        else:
            res = baseline_interpolate(task, model, cfg.baseline_samples, cfg.topk, rng)
            filled, extra = res.sentences, {"score": round(float(res.scores[res.best]), 6)}
        return json.dumps(task_record(task, filled, vocab, extra), sort_keys=True)

    lines = _map(one, range(len(tasks)), args.threads)
    _write(args.out, "".join(line + "\n" for line in lines))


def _zero_scaffold(task):
    return replace(task, scaffold=[max(int(s), 0) for s in task.scaffold])


def _map(fn, items, threads: int) -> list:
    items = list(items)
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def cmd_evaluate(args) -> None:
    _need(args, "checkpoint")
    if not (args.ppl or args.rouge or args.control):
        raise UsageError("evaluate needs at least one of --ppl, --rouge, --control")
    model, vocab = _load(args)
    cfg = _config(args).replace(model=model.kind)
    corpus = args.corpus
    if corpus is None:
        ck = Path(args.checkpoint)
        corpus = (ck if ck.is_dir() else ck.parent) / "test.tsv"
    stories, _ = load_corpus(_exists(corpus), vocab=vocab)
    if args.limit:
        stories = stories[: args.limit]
    seed = args.seed if args.seed is not None else 0
    out = []
    if args.ppl:
        out.append(nll_ppl(model, stories, cfg.mc_samples, np.random.default_rng([seed, 11])).to_kv())
    if args.rouge:
        regimes = [r.strip() for r in args.regimes.split(",") if r.strip()]
        bad = [r for r in regimes if r not in MASKS]
        if bad:
            raise UsageError(f"unknown regimes {bad}; choose from {list(MASKS)}")
        run = runner_for(model, cfg.samples, cfg.burn_in, cfg.baseline_samples, cfg.topk)
        rep = interpolation_benchmark({model.kind: run}, stories, regimes, seed, args.threads)
        out.append(rep.to_kv())
    if args.control:
        if not isinstance(model, SldsModel) or model.K == 1:
            raise UsageError("--control needs a switching (slds) checkpoint")
        labeled = [s.labels for s in stories if s.labels is not None]
        if not labeled:
            raise UsageError("--control needs a labeled corpus")
        rep = sentiment_control_f1(model, labeled, load_lexicon(args.lexicon), vocab,
                                   np.random.default_rng([seed, 13]))
        out.append(rep.to_kv())
    _write(args.out, "".join(out))


HANDLERS = {
    "import": cmd_import, "tag": cmd_tag, "train": cmd_train, "sample": cmd_sample,
    "interpolate": cmd_interpolate, "evaluate": cmd_evaluate, "synth": cmd_synth,
}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        HANDLERS[args.command](args)
    except (UsageError, ConfigError, CorpusError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"narrative-slds {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
