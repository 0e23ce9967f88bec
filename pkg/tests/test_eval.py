import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from narrative_slds import tensor as T
from narrative_slds.config import Config
from narrative_slds.corpus import EOS, Story, Vocabulary
from narrative_slds.eval import (
    MetricReport, generate_from_tags, interpolation_benchmark, macro_f1, nll_ppl, rouge,
    sentiment_control_f1,
)
from narrative_slds.gibbs import MASKS
from narrative_slds.inference import LanguageModel, SldsModel
from narrative_slds.scaffold import load_lexicon

CFG = Config(K=3, latent_dim=2, embed_dim=4, hidden=6, enc_hidden=4, max_sentence_len=5)


def toks(s):
    return s.split()


# ---------------------------------------------------------------- ROUGE


def test_rouge_hand_counts():
    p, r, f = rouge(toks("a b c"), toks("a c d"), "1")
    assert (p, r, f) == pytest.approx((2 / 3, 2 / 3, 2 / 3), abs=0)
    assert rouge(toks("a b c"), toks("a c d"), "L") == pytest.approx((2 / 3, 2 / 3, 2 / 3), abs=0)
    # bigrams {ab, bc, cd} vs {ab, bd, dc}
    assert rouge(toks("a b c d"), toks("a b d c"), "2") == pytest.approx((1 / 3, 1 / 3, 1 / 3), abs=0)
    # clipped unigram counts
    assert rouge(toks("a a a"), toks("a"), "1") == pytest.approx((1 / 3, 1.0, 0.5), abs=0)
    # LCS 3 of "a b c d e" vs "a x c y e"
    assert rouge(toks("a b c d e"), toks("a x c y e"), "L")[2] == pytest.approx(0.6, abs=0)


@pytest.mark.parametrize("variant", ["1", "2", "L"])
def test_rouge_identical_and_disjoint(variant):
    assert rouge(toks("the cat sat"), toks("the cat sat"), variant) == (1.0, 1.0, 1.0)
    assert rouge(toks("x y z"), toks("a b c"), variant) == (0.0, 0.0, 0.0)


def test_rouge_edges():
    assert rouge([], toks("a b"), "1") == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        rouge(toks("a"), [], "1")
    with pytest.raises(ValueError):
        rouge(toks("a"), toks("a"), "3")
    # a one-token reference has no bigrams
    assert rouge(toks("a"), toks("a"), "2") == (0.0, 0.0, 0.0)


words = st.lists(st.sampled_from("abcde"), min_size=1, max_size=8)


@settings(max_examples=200, deadline=None)
@given(words, words, st.sampled_from(["1", "2", "L"]))
def test_rouge_swap_symmetry(a, b, variant):
    p, r, f = rouge(a, b, variant)
    p2, r2, f2 = rouge(b, a, variant)
    assert (p, r) == pytest.approx((r2, p2), abs=1e-15)
    assert f == pytest.approx(f2, abs=1e-15)
    assert 0.0 <= f <= 1.0


# ----------------------------------------------------------- likelihood


def test_uniform_lm_perplexity_is_vocab_size():
    V = 11
    lm = LanguageModel(CFG.replace(model="lm"), V, rng=np.random.default_rng(0))
    lm.lm.out.W.data[...] = 0.0
    lm.lm.out.b.data[...] = 0.0
    stories = [Story([[4, 5, EOS], [EOS]], id="a"), Story([[6, 7, 8, 9, EOS], [10, EOS]], id="b"),
               Story([[4, EOS]], id="c")]
    rep = nll_ppl(lm, stories)
    assert rep.aggregate["ppl"] == pytest.approx(V, rel=1e-12)
    assert rep.aggregate["tokens"] == 13
    assert rep.per_story["nll"][0] == pytest.approx(4 * math.log(V), rel=1e-12)


def test_latent_model_reports_bound():
    m = SldsModel(CFG, 9, rng=np.random.default_rng(0))
    stories = [Story([[4, 5, EOS], [6, EOS]], id=str(j)) for j in range(4)]
    rep = nll_ppl(m, stories, mc_samples=3, rng=np.random.default_rng(0))
    assert rep.config["mc_samples"] == 3
    assert rep.aggregate["nll"] == pytest.approx(np.mean(rep.per_story["nll"]))
    assert rep.aggregate["ppl"] == pytest.approx(math.exp(sum(rep.per_story["nll"]) / 20))


def test_ppl_drops_after_descent_step():
    lm = LanguageModel(CFG.replace(model="lm"), 9, rng=np.random.default_rng(0))
    stories = [Story([[4, 5, EOS], [6, 7, EOS]], id=str(j)) for j in range(3)]
    before = nll_ppl(lm, stories).aggregate["ppl"]
    res = lm.batch_objective(stories)
    T.backward(res.loss)
    opt = T.Adam(lm.parameters(), lr=1e-2)
    opt.step()
    after = nll_ppl(lm, stories).aggregate["ppl"]
    assert after < before


def test_metric_report_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        MetricReport("x", aggregate={"a": float("nan")})
    rep = MetricReport("x", aggregate={"a": 0.5}, config={"k": 1})
    assert rep.to_kv() == "metric=x\na=0.500000\nconfig.k=1\n"
    assert "0.5000" in rep.to_table()


# ------------------------------------------------------ sentiment control


def test_macro_f1_hand_example():
    gold = [0, 0, 1, 1, 2, 2]
    pred = [0, 1, 1, 1, 2, 0]
    f1, per = macro_f1(gold, pred)
    assert per == pytest.approx({0: 0.5, 1: 0.8, 2: 2 / 3})
    assert f1 == pytest.approx((0.5 + 0.8 + 2 / 3) / 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40))
def test_macro_f1_is_mean_of_per_class(pairs):
    gold, pred = zip(*pairs)
    f1, per = macro_f1(gold, pred)
    assert f1 == np.mean(list(per.values()))
    assert 0.0 <= f1 <= 1.0


VOCAB = Vocabulary(["tom", "walked", "sad", "then", "happy", "."])
WORD = {0: "sad", 1: "then", 2: "happy"}


def oracle(tags, rng):
    return [[VOCAB.encode(["tom", WORD[t], "."]) for t in seq] for seq in tags]


def ignorant(tags, rng):
    return [[VOCAB.encode(["tom", WORD[int(rng.integers(3))], "."]) for _ in seq] for seq in tags]


def balanced_tags(n, rng):
    return [list(rng.integers(0, 3, size=5)) for _ in range(n)]


def test_oracle_generator_scores_one():
    lex = load_lexicon()
    rep = sentiment_control_f1(oracle, balanced_tags(50, np.random.default_rng(0)), lex, VOCAB,
                               np.random.default_rng(0))
    assert rep.aggregate["macro_f1"] == 1.0


def test_tag_blind_generator_is_near_chance():
    lex = load_lexicon()
    r = np.random.default_rng(0)
    rep = sentiment_control_f1(ignorant, balanced_tags(1000, r), lex, VOCAB, r)
    assert rep.aggregate["macro_f1"] == pytest.approx(1 / 3, abs=0.03)


def test_generate_from_tags_shapes():
    m = SldsModel(CFG, 9, rng=np.random.default_rng(0))
    tags = [[0, 1, 2], [2, 2], [1, 0, 0]]
    out = generate_from_tags(m, tags, np.random.default_rng(0))
    assert [len(s) for s in out] == [3, 2, 3]
    for story in out:
        for sent in story:
            assert 1 <= len(sent) <= CFG.max_sentence_len and sent[-1] == EOS
    again = generate_from_tags(m, tags, np.random.default_rng(0))
    assert again == out


# ------------------------------------------------------------ benchmark


def stories5(n, seed=0):
    r = np.random.default_rng(seed)
    return [Story([list(r.integers(4, 9, size=3)) + [EOS] for _ in range(5)], id=str(j)) for j in range(n)]


def test_copy_stub_scores_one():
    stories = stories5(6)
    by_id = {s.id: s for s in stories}

    def copier(story, regime, rng):
        return by_id[story.id].sentences

    rep = interpolation_benchmark({"copy": copier}, stories)
    assert set(rep.aggregate) == {f"copy.{r}.{v}" for r in MASKS for v in ("rouge1", "rouge2", "rougeL")}
    assert all(v == 1.0 for v in rep.aggregate.values())


def test_benchmark_independent_of_threads():
    stories = stories5(10, seed=1)

    def noisy(story, regime, rng):
        return [list(rng.integers(4, 9, size=3)) + [EOS] for _ in story.sentences]

    a = interpolation_benchmark({"n": noisy}, stories, ("2nd", "3rd+4th"), seed=3, threads=1)
    b = interpolation_benchmark({"n": noisy}, stories, ("2nd", "3rd+4th"), seed=3, threads=4)
    assert a.per_story == b.per_story
