import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fscil.errors import (
    DuplicateClass,
    EmptyInput,
    LabelOutOfRegistry,
    ShapeMismatch,
    UnknownClass,
    ZeroNormVector,
)
from fscil.metrics import (
    WeightMatrix,
    cosine_scores,
    cross_entropy,
    labels_to_indices,
    prototype,
    scaled_softmax,
    sqeuclid_scores,
)

import oracles

D = torch.float64


def _rand(rng, *shape):
    return torch.from_numpy(rng.normal(size=shape))


# ---------------------------------------------------------------- prototype


def test_prototype_single_embedding_exact():
    e = torch.tensor([[0.1, -2.5, 3.0]], dtype=D)
    w = prototype(e, [7])
    assert w.registry == (7,)
    assert torch.equal(w.rows[0], e[0])


def test_prototype_two_classes_matches_oracle(rng):
    emb = _rand(rng, 10, 6)
    labels = [3] * 5 + [1] * 5
    rng.shuffle(labels)
    w = prototype(emb, labels)
    ref, order = oracles.class_means(emb.numpy(), labels)
    assert list(w.registry) == order
    assert np.abs(w.rows.numpy() - ref).max() < 1e-12


def test_prototype_order_argument(rng):
    emb = _rand(rng, 6, 3)
    w = prototype(emb, [0, 1, 2, 0, 1, 2], order=[2, 0, 1])
    assert w.registry == (2, 0, 1)
    assert torch.allclose(w.rows[0], emb[[2, 5]].mean(0))


def test_prototype_one_row_per_base_class(blob_source):
    w = prototype(blob_source.inputs.reshape(len(blob_source), -1), blob_source.labels)
    assert len(w) == 20 and w.dim == 64


def test_prototype_errors():
    with pytest.raises(EmptyInput):
        prototype(torch.zeros(0, 3), [])
    with pytest.raises(EmptyInput):
        prototype(torch.zeros(2, 3), [0, 0], order=[0, 1])
    with pytest.raises(ShapeMismatch):
        prototype(torch.zeros(2, 3), [0])


@settings(max_examples=40, deadline=None)
@given(k=st.integers(1, 50), n=st.integers(1, 50), d=st.integers(1, 8), seed=st.integers(0, 10**6))
def test_prototype_property(k, n, d, seed):
    r = np.random.default_rng(seed)
    labels = np.concatenate([np.arange(k), r.integers(0, k, size=max(0, n - k))])
    r.shuffle(labels)
    emb = _rand(r, len(labels), d)
    w = prototype(emb, labels.tolist())
    ref, order = oracles.class_means(emb.numpy(), labels.tolist())
    assert list(w.registry) == order
    assert np.abs(w.rows.numpy() - ref).max() < 1e-12


def test_prototype_is_differentiable():
    emb = torch.randn(4, 2, dtype=D, requires_grad=True)
    prototype(emb, [0, 0, 1, 1]).rows.sum().backward()
    assert torch.allclose(emb.grad, torch.full_like(emb, 0.5))


# ---------------------------------------------------------------- cosine


def test_cosine_self_similarity_and_orthogonality():
    w = WeightMatrix(torch.tensor([[1.0, 2.0, 0.0], [0.0, 0.0, 3.0]], dtype=D), (0, 1))
    s = cosine_scores(w.rows[:1].clone(), w)
    assert s[0, 0].item() == pytest.approx(1.0, abs=1e-15)
    assert s[0, 1].item() == 0.0


def test_cosine_scale_invariance(rng):
    emb, rows = _rand(rng, 5, 4), _rand(rng, 3, 4)
    assert torch.allclose(cosine_scores(emb, rows), cosine_scores(3.7 * emb, rows), atol=1e-14)


def test_cosine_zero_norm_raises():
    with pytest.raises(ZeroNormVector):
        cosine_scores(torch.zeros(1, 3), torch.ones(2, 3))
    with pytest.raises(ZeroNormVector):
        cosine_scores(torch.ones(1, 3), torch.zeros(2, 3))


def test_cosine_matches_oracle(rng):
    emb, rows = _rand(rng, 7, 5), _rand(rng, 4, 5)
    ref = oracles.score_table(emb.numpy(), rows.numpy(), oracles.cosine)
    assert np.abs(cosine_scores(emb, rows).numpy() - ref).max() < 1e-12


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 8), d=st.integers(1, 16), seed=st.integers(0, 10**6), alpha=st.floats(1e-3, 1e3))
def test_cosine_properties(n, d, seed, alpha):
    r = np.random.default_rng(seed)
    a, b = _rand(r, n, d), _rand(r, n, d)
    s = cosine_scores(a, b)
    assert torch.allclose(s, cosine_scores(b, a).T, atol=1e-14)
    assert s.min() >= -1 and s.max() <= 1
    # argmax is unchanged by positive rescaling of embeddings
    assert torch.equal(s.argmax(1), cosine_scores(alpha * a, b).argmax(1))


# ---------------------------------------------------------------- sq euclid


def test_sqeuclid_hand_value():
    e = torch.tensor([[1.0, 0, 0, 0]], dtype=D)
    w = torch.tensor([[0.0, 1, 0, 0]], dtype=D)
    assert sqeuclid_scores(e, w).item() == -0.5
    assert oracles.neg_sq_dist(e[0].tolist(), w[0].tolist()) == -0.5


def test_sqeuclid_zero_at_self(rng):
    rows = _rand(rng, 3, 5) * 100
    s = sqeuclid_scores(rows.clone(), rows)
    assert torch.all(s.diagonal() == 0)
    assert torch.all(s[~torch.eye(3, dtype=torch.bool)] < 0)


def test_sqeuclid_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        sqeuclid_scores(torch.zeros(2, 3), torch.zeros(2, 4))


def test_sqeuclid_chunking_consistent(rng):
    emb, rows = _rand(rng, 37, 4), _rand(rng, 5, 4)
    assert torch.equal(sqeuclid_scores(emb, rows, chunk=7), sqeuclid_scores(emb, rows))


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 8), d=st.integers(1, 16), seed=st.integers(0, 10**6))
def test_sqeuclid_properties(n, d, seed):
    r = np.random.default_rng(seed)
    a, b, t = _rand(r, n, d), _rand(r, n, d), _rand(r, 1, d)
    s = sqeuclid_scores(a, b)
    assert (s <= 0).all()
    assert torch.allclose(s, sqeuclid_scores(b, a).T, atol=1e-14)
    assert torch.allclose(s, sqeuclid_scores(a + 5 * t, b + 5 * t), atol=1e-10)
    ref = oracles.score_table(a.numpy(), b.numpy(), oracles.neg_sq_dist)
    assert np.abs(s.numpy() - ref).max() < 1e-12


# ---------------------------------------------------------------- softmax


def test_softmax_uniform_for_equal_scores():
    p = scaled_softmax(torch.full((3, 7), 0.3, dtype=D), 16)
    assert torch.allclose(p, torch.full_like(p, 1 / 7), atol=1e-15)


def test_softmax_sharpens_at_large_scale():
    scores = torch.tensor([[1.0, 0.0, 0.0, -0.5]], dtype=D)
    p = scaled_softmax(scores, 100)
    assert p[0, 0] >= 0.999
    assert p[0, 0].item() == pytest.approx(oracles.softmax_row(scores[0].tolist(), 100)[0], abs=1e-15)


def test_softmax_survives_huge_scores():
    p = scaled_softmax(torch.tensor([[1e4, 0.0]], dtype=D), 16)
    assert torch.isfinite(p).all() and p[0, 0] == 1.0


def test_softmax_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        scaled_softmax(torch.zeros(1, 2), 0)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 6), k=st.integers(1, 10), s=st.floats(0.1, 64), seed=st.integers(0, 10**6))
def test_softmax_properties(n, k, s, seed):
    r = np.random.default_rng(seed)
    z = _rand(r, n, k)
    p = scaled_softmax(z, s)
    assert torch.allclose(p.sum(1), torch.ones(n, dtype=D), atol=1e-6)
    assert (p >= 0).all() and (p <= 1).all()
    shift = _rand(r, n, 1) * 10
    assert torch.allclose(p, scaled_softmax(z + shift, s), atol=1e-12)


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_perfect_and_uniform():
    assert cross_entropy(torch.eye(4, dtype=D), [0, 1, 2, 3]).item() == 0.0
    k = 6
    assert cross_entropy(torch.full((2, k), 1 / k, dtype=D), [0, 5]).item() == pytest.approx(math.log(k))


def test_cross_entropy_matches_oracle(rng):
    p = scaled_softmax(_rand(rng, 9, 5), 4)
    t = rng.integers(0, 5, size=9).tolist()
    assert abs(cross_entropy(p, t).item() - oracles.mean_xent(p.numpy(), t)) < 1e-12


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(LabelOutOfRegistry):
        cross_entropy(torch.eye(2), [2, 0])


# ---------------------------------------------------------------- weight matrix


def test_weight_matrix_validation():
    with pytest.raises(ShapeMismatch):
        WeightMatrix(torch.zeros(2, 3), (0,))
    with pytest.raises(DuplicateClass):
        WeightMatrix(torch.zeros(2, 3), (0, 0))
    with pytest.raises(ValueError):
        WeightMatrix(torch.tensor([[float("nan")]]), (0,))


def test_weight_matrix_concat_and_drop():
    a = WeightMatrix(torch.arange(6.0).reshape(3, 2), (5, 1, 9))
    b = WeightMatrix(torch.ones(1, 2), (2,))
    c = a.concat(b)
    assert c.registry == (5, 1, 9, 2)
    assert torch.equal(c.rows[:3], a.rows)
    d = c.drop([1, 2])
    assert d.registry == (5, 9)
    assert torch.equal(d.rows, a.rows[[0, 2]])
    with pytest.raises(DuplicateClass):
        a.concat(a)
    with pytest.raises(UnknownClass):
        a.drop([42])
    assert a.concat(WeightMatrix.empty(2)) is a
    assert WeightMatrix.empty(2).concat(b).registry == (2,)


def test_labels_to_indices():
    assert labels_to_indices([9, 4, 9], (4, 9)).tolist() == [1, 0, 1]
    with pytest.raises(LabelOutOfRegistry):
        labels_to_indices([3], (4, 9))
