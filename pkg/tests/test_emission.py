import itertools
import math

import numpy as np
import pytest
from scipy import stats

from narrative_slds import tensor as T
from narrative_slds.corpus import BOS, EOS
from narrative_slds.emission import (GruLm, LinearGaussianEmission, consume, greedy_decode,
                                     linear_gaussian_log_prob, pad_batch, sentence_log_prob, topk_sample)
from narrative_slds.gaussian import Gaussian, log_pdf
from narrative_slds.nn import GRUCell
from narrative_slds.tensor import Tensor

from conftest import check_grads


def small_lm(V=7, d=2, seed=0, hidden=5):
    return GruLm(V, 4, hidden, d, np.random.default_rng(seed))


def uniform_head(lm):
    lm.out.W.data[:] = 0
    lm.out.b.data[:] = 0


def test_uniform_head_log_prob():
    lm = small_lm(V=5)
    uniform_head(lm)
    lp, _ = sentence_log_prob(lm, np.ones(2), lm.initial_context(1)[0], [4, 4, EOS])
    assert lp == pytest.approx(3 * math.log(1 / 5), abs=1e-12)


def test_log_prob_deterministic():
    lm = small_lm()
    ctx = np.random.default_rng(1).normal(size=5)
    a = sentence_log_prob(lm, [0.3, -1.0], ctx, [4, 5, EOS])
    b = sentence_log_prob(lm, [0.3, -1.0], ctx, [4, 5, EOS])
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_sentence_must_end_with_eos():
    lm = small_lm()
    with pytest.raises(ValueError, match="eos"):
        sentence_log_prob(lm, [0, 0], lm.initial_context(1)[0], [4, 5])


def test_token_outside_vocabulary():
    lm = small_lm(V=6)
    with pytest.raises(ValueError, match="outside"):
        sentence_log_prob(lm, [0, 0], lm.initial_context(1)[0], [6, EOS])


def test_per_step_distribution_normalized():
    lm = small_lm()
    toks, lens = pad_batch([[4, 5, 6, EOS]])
    with T.no_grad():
        h, gz = lm._start(Tensor([[0.2, 0.1]]), Tensor(lm.initial_context(1)))
        tok = np.array([BOS])
        for t in range(4):
            logits, h = lm.step_logits(tok, gz, h)
            assert abs(T.logsumexp(T.log_softmax(logits, axis=-1), axis=-1).data[0]) < 1e-9
            tok = toks[:, t]


def test_enumeration_normalization():
    """P(all sentences with <= L tokens) + P(no eos in the first L steps) = 1."""
    V, L = 4, 3
    lm = small_lm(V=V, d=1, seed=3)
    z, ctx = np.array([0.7]), lm.initial_context(1)[0]
    non_eos = [t for t in range(V) if t != EOS]
    total = 0.0
    for n in range(1, L + 1):
        for prefix in itertools.product(non_eos, repeat=n - 1):
            total += math.exp(sentence_log_prob(lm, z, ctx, list(prefix) + [EOS])[0])
    # mass of length-L prefixes without eos, from teacher-forced per-step log-probs
    prefixes = [list(p) + [EOS] for p in itertools.product(non_eos, repeat=L)]
    toks, lens = pad_batch(prefixes)
    with T.no_grad():
        _, _, steps = lm.teacher_force(Tensor(np.tile(z, (len(prefixes), 1))), np.tile(ctx, (len(prefixes), 1)),
                                       toks, lens, return_steps=True)
    total += np.exp(steps.data[:, :L].sum(1)).sum()
    assert abs(total - 1.0) < 1e-6


def test_batched_teacher_forcing_matches_single():
    lm = small_lm()
    sents = [[4, EOS], [5, 6, 4, EOS], [6, 6, EOS]]
    zs = np.random.default_rng(0).normal(size=(3, 2))
    ctx = np.random.default_rng(1).normal(size=(3, 5))
    toks, lens = pad_batch(sents)
    with T.no_grad():
        lp, h = lm.teacher_force(Tensor(zs), ctx, toks, lens)
    for i, s in enumerate(sents):
        single, hs = sentence_log_prob(lm, zs[i], ctx[i], s)
        assert lp.data[i] == pytest.approx(single, abs=1e-12)
        np.testing.assert_allclose(h.data[i], hs, atol=1e-12)


def test_context_carry_changes_later_sentence():
    lm = small_lm(seed=5)
    z = np.array([0.1, 0.2])
    c1 = consume(lm, z, lm.initial_context(1)[0], [4, 5, EOS])
    c2 = consume(lm, z, lm.initial_context(1)[0], [6, 6, EOS])
    a = sentence_log_prob(lm, z, c1, [5, EOS])[0]
    b = sentence_log_prob(lm, z, c2, [5, EOS])[0]
    assert a != b


def chain_lm():
    """GRU whose hidden state is (almost) the one-hot of the last input; head maps bos->4->5->eos."""
    V = 6
    lm = GruLm(V, V, V, 0, np.random.default_rng(0))
    lm.emb.table.data = 4.0 * np.eye(V)
    lm.cell.W_h.data[:] = 0
    lm.cell.b_h.data[:] = 0
    W = np.zeros((V, 3 * V))
    W[:, 2 * V:] = np.eye(V)
    lm.cell.W_x.data = W
    b = np.zeros(3 * V)
    b[V:2 * V] = -50.0  # update gate closed: h' = candidate
    lm.cell.b_x.data = b
    out = np.zeros((V, V))
    out[BOS, 4] = out[4, 5] = out[5, EOS] = 5.0
    lm.out.W.data = out
    lm.out.b.data[:] = 0
    return lm


def test_greedy_hand_traced_chain():
    lm = chain_lm()
    assert greedy_decode(lm, None, lm.initial_context(1)[0], 10) == [4, 5, EOS]


def test_greedy_eos_bias():
    lm = small_lm()
    lm.out.b.data[:] = 0
    lm.out.b.data[EOS] = 100.0
    assert greedy_decode(lm, np.zeros(2), lm.initial_context(1)[0], 5) == [EOS]


def test_greedy_ties_lowest_id_and_forced_eos():
    lm = small_lm()
    uniform_head(lm)
    assert greedy_decode(lm, np.zeros(2), lm.initial_context(1)[0], 4) == [0, 0, 0, EOS]


def test_greedy_deterministic():
    lm = small_lm(seed=9)
    a = greedy_decode(lm, [0.5, 0.5], lm.initial_context(1)[0], 8)
    assert a == greedy_decode(lm, [0.5, 0.5], lm.initial_context(1)[0], 8)


def test_topk_one_is_greedy():
    lm = small_lm(seed=2)
    ctx = lm.initial_context(1)[0]
    g = greedy_decode(lm, [1.0, -1.0], ctx, 8)
    for s in range(5):
        assert topk_sample(lm, [1.0, -1.0], ctx, 1, np.random.default_rng(s), 8) == g


def first_token_probs(lm, z):
    with T.no_grad():
        h, gz = lm._start(Tensor(np.atleast_2d(z)), Tensor(lm.initial_context(1)))
        logits, _ = lm.step_logits(np.array([BOS]), gz, h)
    return T.softmax(logits, axis=-1).data[0]


def test_topk_full_vocab_is_unbiased():
    lm = small_lm(V=6, seed=4)
    lm.out.W.data *= 5
    z = np.array([0.3, 0.9])
    n = 100_000
    out, _ = lm.generate(np.tile(z, (n, 1)), lm.initial_context(n), 2, k=6, rng=np.random.default_rng(0))
    counts = np.bincount([s[0] for s in out], minlength=6)
    p = first_token_probs(lm, z)
    assert stats.chisquare(counts, p * n).pvalue > 0.01


def test_topk_never_emits_outside_top_k():
    lm = small_lm(V=7, seed=6)
    z = np.array([0.2, -0.4])
    p = first_token_probs(lm, z)
    allowed = set(np.argsort(-p, kind="stable")[:3])
    n = 10_000
    out, _ = lm.generate(np.tile(z, (n, 1)), lm.initial_context(n), 2, k=3, rng=np.random.default_rng(1))
    assert {s[0] for s in out} <= allowed


def test_topk_range_checked():
    lm = small_lm(V=5)
    with pytest.raises(ValueError):
        topk_sample(lm, [0, 0], lm.initial_context(1)[0], 6, np.random.default_rng(0), 4)


def test_generate_rejects_zero_max_len():
    lm = small_lm()
    with pytest.raises(ValueError):
        greedy_decode(lm, [0, 0], lm.initial_context(1)[0], 0)


def test_gru_cell_gradient(rng):
    cell = GRUCell(3, 4, rng)
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    h = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    w = rng.normal(size=(2, 4))
    params = dict(cell.named_parameters())
    params.update(x=x, h=h)
    check_grads(lambda: (cell(x, h) * w).sum(), params)


def test_emission_head_gradient(rng):
    lm = small_lm(V=6, d=2, hidden=3)
    z = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    ctx = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    toks, lens = pad_batch([[4, 5, EOS], [5, EOS]])
    params = dict(lm.named_parameters())
    params.update(z=z, ctx=ctx)
    check_grads(lambda: lm.teacher_force(z, ctx, toks, lens)[0].sum(), params)


def test_latent_conditioning_after_training():
    """Train on sentences whose first token is the sign of z; the model must use z."""
    rng = np.random.default_rng(0)
    lm = GruLm(6, 4, 8, 1, rng)
    opt = T.Adam(lm.parameters(), lr=0.05)
    for _ in range(150):
        z = rng.normal(size=(32, 1))
        sents = [[4 if v > 0 else 5, EOS] for v in z[:, 0]]
        toks, lens = pad_batch(sents)
        opt.zero_grad()
        lp, _ = lm.teacher_force(Tensor(z), lm.initial_context(32), toks, lens)
        T.backward(lp.sum() * (-1 / 32))
        opt.step()
    ctx = lm.initial_context(1)[0]
    assert sentence_log_prob(lm, [1.5], ctx, [4, EOS])[0] > sentence_log_prob(lm, [-1.5], ctx, [4, EOS])[0]
    assert greedy_decode(lm, [1.5], ctx, 4) == [4, EOS]
    assert greedy_decode(lm, [-1.5], ctx, 4) == [5, EOS]


# ------------------------------------------------------------ linear Gaussian


def test_linear_gaussian_identity():
    em = LinearGaussianEmission(np.eye(3), np.eye(3))
    z = np.array([0.1, 2.0, -1.0])
    assert linear_gaussian_log_prob(em, z, z) == pytest.approx(-1.5 * math.log(2 * math.pi), abs=1e-14)


def test_linear_gaussian_delegates_to_log_pdf(rng):
    C = rng.normal(size=(3, 2))
    R = np.tril(rng.normal(size=(3, 3)) * 0.3, -1) + np.eye(3)
    em = LinearGaussianEmission(C, R)
    z, x = rng.normal(size=2), rng.normal(size=3)
    assert linear_gaussian_log_prob(em, z, x) == log_pdf(Gaussian(C @ z, R), x)
    assert float(em.log_prob_tensor(Tensor(z), x).data) == pytest.approx(log_pdf(Gaussian(C @ z, R), x), abs=1e-12)


def test_linear_gaussian_gradient(rng):
    C = rng.normal(size=(3, 2))
    R = np.tril(rng.normal(size=(3, 3)) * 0.3, -1) + np.eye(3)
    em = LinearGaussianEmission(C, R)
    z = Tensor(rng.normal(size=2), requires_grad=True)
    x = rng.normal(size=3)
    check_grads(lambda: em.log_prob_tensor(z, x), {"z": z}, tol=1e-6)


def test_linear_gaussian_dim_mismatch():
    em = LinearGaussianEmission(np.eye(2), np.eye(2))
    with pytest.raises(ValueError, match="dimension"):
        linear_gaussian_log_prob(em, np.zeros(3), np.zeros(2))
