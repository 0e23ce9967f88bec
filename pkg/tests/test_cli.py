import json
import re
from importlib import resources

import pytest

from narrative_slds.cli import build_parser, run
from narrative_slds.corpus import MISSING

DATA = resources.files("narrative_slds") / "data"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A small slds checkpoint trained on the bundled sample."""
    d = tmp_path_factory.mktemp("ck")
    code = run(["train", "--config", str(DATA / "smoke.cfg"), "--model", "slds", "--labels", "100",
                "--corpus", str(DATA / "sample_stories.tsv"), "--checkpoint", str(d / "run"),
                "--out", str(d / "history.txt"), "--seed", "1"])
    assert code == 0
    return d


def test_train_then_evaluate_ppl(trained, tmp_path):
    ck = trained / "run"
    for name in ("best.ckpt", "vocab.txt", "train.tsv", "valid.tsv", "test.tsv", "epoch-001.ckpt"):
        assert (ck / name).exists(), name
    assert "best_epoch=" in (trained / "history.txt").read_text()
    out = tmp_path / "ppl.txt"
    assert run(["evaluate", "--ppl", "--checkpoint", str(ck), "--out", str(out)]) == 0
    kv = dict(line.split("=", 1) for line in out.read_text().splitlines())
    assert kv["metric"] == "nll_ppl"
    assert 1.0 < float(kv["ppl"]) < 1e4


def test_evaluate_control_and_rouge(trained, tmp_path):
    out = tmp_path / "m.txt"
    assert run(["evaluate", "--control", "--rouge", "--regimes", "4th", "--limit", "4", "--threads", "1",
                "--config", str(DATA / "smoke.cfg"), "--checkpoint", str(trained / "run"), "--out", str(out)]) == 0
    text = out.read_text()
    assert "metric=interpolation" in text and "slds.4th.rouge1=" in text
    assert "metric=sentiment_control" in text


def write_tasks(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def test_interpolate_without_gaps_echoes(trained, tmp_path):
    sents = ["tom walked home happy", "anna played outside then"]
    write_tasks(tmp_path / "t.jsonl", [{"sentences": sents, "scaffold": ["POS", "NEU"], "id": "x"}])
    out = tmp_path / "o.jsonl"
    assert run(["interpolate", "--checkpoint", str(trained / "run"), "--tasks", str(tmp_path / "t.jsonl"),
                "--out", str(out)]) == 0
    rec = json.loads(out.read_text())
    assert rec["sentences"] == sents and rec["id"] == "x"


def interp_tasks(tmp_path):
    rows = [
        {"sentences": ["tom walked home happy", MISSING, "max played outside sad", MISSING, "lily worked home then"],
         "id": f"t{j}", "seed": j}
        for j in range(5)
    ]
    write_tasks(tmp_path / "t.jsonl", rows)
    return tmp_path / "t.jsonl"


def test_interpolate_clamps_and_is_deterministic(trained, tmp_path):
    tasks = interp_tasks(tmp_path)
    outs = []
    for threads, name in ((1, "a"), (1, "b"), (8, "c")):
        out = tmp_path / f"{name}.jsonl"
        assert run(["interpolate", "--checkpoint", str(trained / "run"), "--tasks", str(tasks), "--seed", "7",
                    "--samples", "4", "--burn-in", "1", "--threads", str(threads), "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]
    for line in outs[0].decode().splitlines():
        rec = json.loads(line)
        assert rec["sentences"][0] == "tom walked home happy"
        assert rec["sentences"][4] == "lily worked home then"
        assert rec["observed"] == [True, False, True, False, True]


def test_seed_changes_output(trained, tmp_path):
    tasks = interp_tasks(tmp_path)
    outs = []
    for seed in ("1", "2"):
        out = tmp_path / f"{seed}.jsonl"
        run(["interpolate", "--checkpoint", str(trained / "run"), "--tasks", str(tasks), "--seed", seed,
             "--samples", "4", "--burn-in", "1", "--out", str(out)])
        outs.append(out.read_text())
    assert outs[0] != outs[1]


def test_sample_and_synth_deterministic(trained, tmp_path):
    for cmd in (["sample", "--checkpoint", str(trained / "run"), "--scaffold", "POS,NEG,NEU", "--n", "3"],
                ["synth", "--n", "5", "--K", "1"]):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run(cmd + ["--seed", "7", "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
    lines = (tmp_path / "a").read_text().splitlines()
    assert len(lines) == 5


def test_tag_and_import(tmp_path):
    csv = tmp_path / "r.csv"
    csv.write_text("storyid,storytitle,sentence1,sentence2,sentence3,sentence4,sentence5\n"
                   "1,t,Tom was happy.,It rained.,He was sad.,Then he ate.,Good day!\n")
    assert run(["import", "--corpus", str(csv), "--out", str(tmp_path / "s.tsv")]) == 0
    assert run(["tag", "--corpus", str(tmp_path / "s.tsv"), "--out", str(tmp_path / "t.tsv")]) == 0
    assert (tmp_path / "t.tsv").read_text().rstrip("\n").split("\t")[-1] == "POS,NEU,NEG,NEU,POS"


def test_errors(trained, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("hidden = 8\nwidth = 3\ndepth = 2\n")
    assert run(["train", "--config", str(bad), "--corpus", str(DATA / "sample_stories.tsv"),
                "--checkpoint", str(tmp_path / "x")]) == 2
    assert "width, depth" in capsys.readouterr().err
    assert run(["evaluate", "--ppl", "--checkpoint", str(tmp_path / "missing")]) == 2
    assert "no such file" in capsys.readouterr().err
    other = tmp_path / "other.cfg"
    other.write_text("latent_dim = 7\n")
    assert run(["evaluate", "--ppl", "--config", str(other), "--checkpoint", str(trained / "run")]) == 2
    assert "latent_dim" in capsys.readouterr().err
    assert run(["evaluate", "--checkpoint", str(trained / "run")]) == 2
    with pytest.raises(SystemExit) as exc:
        run(["train", "--no-such-flag"])
    assert exc.value.code != 0


def test_help_lists_every_flag(capsys):
    with pytest.raises(SystemExit):
        run(["--help"])
    text = capsys.readouterr().out
    flags = {o for a in build_parser()._actions for o in a.option_strings}
    for f in ["--config", "--model", "--labels", "--seed", "--threads", "--checkpoint", "--out",
              "--samples", "--burn-in", "--topk"]:
        assert f in flags
    for f in flags:
        assert re.search(re.escape(f) + r"\b", text), f
