import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from bhavnet.model import HyperParams, PairForward
from bhavnet.objective import bce_loss, margin_loss, margin_terms, total_loss
from bhavnet.tensor import GradTape, InvalidInputError, Tensor

from conftest import TINY


def pair(s1, s2, a1, a2):
    return PairForward(*(Tensor(np.asarray(v, dtype=float)) for v in (s1, s2, a1, a2)), Tensor(0.0), Tensor(0.0))


def batch_forward(rng, n, dim=3, scale=1.0):
    vals = [np.maximum(rng.normal(size=(n, dim)) * scale, 0) for _ in range(4)]
    return PairForward(*(Tensor(v) for v in vals), Tensor(np.zeros(n)), Tensor(np.zeros(n))), vals


def test_bce_at_half_is_ln2():
    assert bce_loss([0.5], [1]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert bce_loss([0.5], [0]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_confident_and_clamped():
    assert bce_loss([1 - 1e-7], [1]).item() == pytest.approx(1e-7, rel=1e-6)
    # exact 0 and 1 are clamped, so the loss stays finite
    assert math.isfinite(bce_loss([0.0, 1.0], [1, 0]).item())
    assert bce_loss([0.0], [1]).item() == pytest.approx(-math.log(1e-7), rel=1e-12)


def test_bce_two_pair_example():
    assert bce_loss([0.9, 0.2], [1, 0]).item() == pytest.approx(0.164252033486018, abs=1e-12)


def test_bce_rejects_bad_labels():
    with pytest.raises(InvalidInputError):
        bce_loss([0.5], [2])
    with pytest.raises(InvalidInputError):
        bce_loss([0.5, 0.5], [1])


def test_margin_examples():
    # synonym with a large dot product: no penalty
    assert margin_loss(pair([1, 1], [1, 1], [0, 0], [0, 0]), 0).item() == 0.0
    # synonym with dot 0.9
    assert margin_loss(pair([0.9], [1.0], [0], [0]), 0).item() == pytest.approx(0.0837021298009756, abs=1e-15)
    # antonym with orthogonal antonym projections: no penalty
    assert margin_loss(pair([0, 0], [0, 0], [1, 0], [0, 1]), 1).item() == 0.0
    # antonym with dot 2
    assert margin_loss(pair([0], [0], [1.0], [2.0]), 1).item() == pytest.approx(math.tanh(2) - 0.2, abs=1e-15)


def test_margin_zero_vectors():
    assert margin_loss(pair([0, 0], [0, 0], [0, 0], [0, 0]), 0).item() == pytest.approx(0.8)
    assert margin_loss(pair([0, 0], [0, 0], [0, 0], [0, 0]), 1).item() == 0.0


def test_lambda_zero_total_equals_bce(rng):
    pf, _ = batch_forward(rng, 4)
    preds = rng.uniform(0.05, 0.95, size=4)
    lb = total_loss(preds, [0, 1, 1, 0], pf, HyperParams(**TINY, lambda_w=0.0))
    assert lb.total == lb.bce


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_total_matches_oracle(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 9))
    pf, vals = batch_forward(r, n, dim=int(r.integers(1, 6)), scale=float(r.uniform(0.1, 2)))
    preds = r.uniform(0, 1, size=n)
    labels = r.integers(0, 2, size=n)
    lam = float(r.uniform(0, 3))
    lb = total_loss(preds, labels, pf, HyperParams(**TINY, lambda_w=lam))
    quads = [tuple(v[i].tolist() for v in vals) for i in range(n)]
    assert lb.bce == pytest.approx(oracles.bce(preds.tolist(), labels.tolist()), abs=1e-9)
    assert lb.total == pytest.approx(oracles.total(preds.tolist(), labels.tolist(), quads, lam), abs=1e-9)
    for i in range(n):
        assert lb.per_pair_margin[i] == pytest.approx(oracles.margin(*quads[i], int(labels[i])), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_margin_bounds(seed):
    r = np.random.default_rng(seed)
    pf, _ = batch_forward(r, 6, scale=3.0)
    terms = margin_terms(pf.s1, pf.s2, pf.a1, pf.a2, r.integers(0, 2, size=6)).data
    # non-negative projections keep tanh(dot) in [0, 1)
    assert np.all(terms >= 0) and np.all(terms <= 0.8 + 1e-12)
    # raw vectors of either sign stay within m_syn + 1
    raw = [Tensor(r.normal(size=(6, 3)) * 3) for _ in range(4)]
    assert np.all(margin_terms(*raw, r.integers(0, 2, size=6)).data <= 1.8)


def test_total_is_permutation_invariant(rng):
    pf, vals = batch_forward(rng, 6)
    preds = rng.uniform(size=6)
    labels = np.array([0, 1, 0, 1, 1, 0])
    hp = HyperParams(**TINY)
    perm = rng.permutation(6)
    pf_p = PairForward(*(Tensor(v[perm]) for v in vals), Tensor(np.zeros(6)), Tensor(np.zeros(6)))
    a = total_loss(preds, labels, pf, hp).total
    b = total_loss(preds[perm], labels[perm], pf_p, hp).total
    assert a == pytest.approx(b, abs=1e-14)


def test_derivative_in_lambda_is_margin(rng):
    pf, _ = batch_forward(rng, 5)
    preds, labels = rng.uniform(size=5), [0, 1, 1, 0, 1]
    f = lambda lam: total_loss(preds, labels, pf, HyperParams(**TINY, lambda_w=lam)).total  # noqa: E731
    eps = 1e-5
    numeric = (f(1.0 + eps) - f(1.0 - eps)) / (2 * eps)
    assert numeric == pytest.approx(total_loss(preds, labels, pf, HyperParams(**TINY)).margin, abs=1e-8)


def test_kink_subgradient_is_zero():
    # tanh(<s1, s2>) == m_syn exactly: the hinge contributes no gradient
    s1 = Tensor([[math.atanh(0.8)]])
    s2 = Tensor([[1.0]])
    with GradTape() as tape:
        m = margin_terms(s1, s2, Tensor([[0.0]]), Tensor([[0.0]]), [0])
    assert m.data[0] == pytest.approx(0.0, abs=1e-15)
    g1, _ = tape.gradient(m, [s1, s2])
    assert np.all(g1 == 0.0)


def test_margin_gradient_sign():
    # pushing a synonym pair apart increases the loss
    s1, s2 = Tensor([[0.3]]), Tensor([[0.5]])
    with GradTape() as tape:
        m = margin_terms(s1, s2, Tensor([[0.0]]), Tensor([[0.0]]), [0])
    (g,) = tape.gradient(m, [s1])
    assert g[0, 0] < 0
