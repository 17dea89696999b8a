import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgnn import autodiff as ad
from tgnn.autodiff import DimensionError, Tensor
from tgnn.local_branch import (
    GatParams,
    LocalBranch,
    Neighborhood,
    gat_attention,
    gat_coefficients,
    gat_forward,
)


def eye(d):
    return GatParams(Tensor(np.eye(d), requires_grad=True))


def random_tree(rng, n):
    return [(int(rng.integers(0, i)), i) for i in range(1, n)]


def naive_gat(F, nb, W, strict=True):
    P = W @ F
    out = np.zeros_like(F)
    for i, js in enumerate(nb.neighbors):
        e = np.array([P[:, i] @ P[:, j] for j in js])
        a = np.exp(e - e.max())
        a /= a.sum()
        out[:, i] = sum(a_k * F[:, j] for a_k, j in zip(a, js))
        if strict:
            out[:, i] /= len(js)
    return out


def test_neighborhood_invariants():
    nb = Neighborhood.from_edges(4, [(0, 1), (1, 2), (0, 3)])
    assert nb.neighbors == ((0, 1, 3), (0, 1, 2), (1, 2), (0, 3))
    for i, js in enumerate(nb.neighbors):
        assert i in js
        for j in js:
            assert i in nb.neighbors[j]
    assert (nb.sizes >= 1).all()
    with pytest.raises(IndexError):
        Neighborhood.from_edges(2, [(0, 5)])


def test_coefficients_examples():
    nb = Neighborhood.from_edges(2, [(0, 1)])
    e = gat_coefficients(Tensor([[1.0, 0.0], [0.0, 1.0]]), nb, eye(2))
    assert e[(0, 1)] == 0.0
    f = np.array([1.0, -2.0, 3.0])
    e = gat_coefficients(Tensor(np.stack([f, f], axis=1)), nb, eye(3))
    assert e[(0, 1)] == pytest.approx(14.0, abs=1e-15)


def test_coefficients_hand_expansion():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((3, 3))
    F = rng.standard_normal((3, 2))
    e = gat_coefficients(Tensor(F), Neighborhood.from_edges(2, [(0, 1)]), GatParams(Tensor(W)))
    wf0 = [sum(W[r, c] * F[c, 0] for c in range(3)) for r in range(3)]
    wf1 = [sum(W[r, c] * F[c, 1] for c in range(3)) for r in range(3)]
    assert e[(0, 1)] == pytest.approx(sum(a * b for a, b in zip(wf0, wf1)), abs=1e-12)
    assert e[(0, 1)] == e[(1, 0)]


def test_isolated_node_passes_through():
    F = Tensor(np.random.default_rng(1).standard_normal((4, 1)))
    out = gat_forward(F, Neighborhood.from_edges(1, []), GatParams.init(4, np.random.default_rng(2)))
    np.testing.assert_array_equal(out.data, F.data)


def test_two_equal_nodes_literal_halving():
    f = np.random.default_rng(3).standard_normal(5)
    F = Tensor(np.stack([f, f], axis=1))
    out = gat_forward(F, Neighborhood.from_edges(2, [(0, 1)]), GatParams.init(5, np.random.default_rng(4)))
    np.testing.assert_allclose(out.data, np.stack([f / 2, f / 2], axis=1), rtol=0, atol=1e-12)


def test_star_center_closed_form():
    rng = np.random.default_rng(5)
    s, r = rng.standard_normal(3), rng.standard_normal(3)
    F = np.stack([s, r, r, r], axis=1)
    out = gat_forward(Tensor(F), Neighborhood.from_edges(4, [(0, 1), (0, 2), (0, 3)]), eye(3))
    # with W = I the centre scores are [s.s, s.r, s.r, s.r]
    e = np.array([s @ s, s @ r, s @ r, s @ r])
    a = np.exp(e - e.max()) / np.exp(e - e.max()).sum()
    np.testing.assert_allclose(out.data[:, 0], (a[0] * s + a[1:].sum() * r) / 4, atol=1e-12)


def test_star_identical_features_uniform():
    f = np.random.default_rng(6).standard_normal(3)
    F = np.stack([f] * 4, axis=1)
    out = gat_forward(Tensor(F), Neighborhood.from_edges(4, [(0, 1), (0, 2), (0, 3)]), eye(3))
    np.testing.assert_allclose(out.data[:, 0], F.mean(axis=1) / 4, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    n, d = 6, 4
    nb = Neighborhood.from_edges(n, random_tree(rng, n))
    W = rng.standard_normal((d, d)) * 0.5
    F = rng.standard_normal((d, n))
    for strict in (True, False):
        out = gat_forward(Tensor(F), nb, GatParams(Tensor(W)), strict_eq7=strict)
        np.testing.assert_allclose(out.data, naive_gat(F, nb, W, strict), rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_attention_rows_sum_to_one(seed, n):
    rng = np.random.default_rng(seed)
    nb = Neighborhood.from_edges(n, random_tree(rng, n))
    alpha = gat_attention(Tensor(rng.standard_normal((4, n))), nb, GatParams.init(4, rng)).data
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-9)
    assert (alpha[~nb.mask()] == 0).all()
    assert (alpha[nb.mask()] > 0).all()


@pytest.mark.parametrize("seed", range(10))
def test_permutation_equivariance_exact(seed):
    rng = np.random.default_rng(seed)
    n, d = 6, 5
    nb = Neighborhood.from_edges(n, random_tree(rng, n))
    W = GatParams.init(d, rng)
    F = rng.standard_normal((d, n))
    perm = rng.permutation(n)
    out = gat_forward(Tensor(F), nb, W).data
    out_p = gat_forward(Tensor(F[:, perm]), nb.permuted(perm), W).data
    assert np.array_equal(out_p, out[:, perm])


def test_coefficients_symmetric_exactly():
    rng = np.random.default_rng(9)
    nb = Neighborhood.from_edges(5, random_tree(rng, 5))
    e = gat_coefficients(Tensor(rng.standard_normal((4, 5))), nb, GatParams.init(4, rng))
    for (i, j), v in e.items():
        assert v == e[(j, i)]


def test_non_neighbours_never_mix():
    rng = np.random.default_rng(10)
    nb = Neighborhood.from_edges(5, [(0, 1), (1, 2), (0, 3), (3, 4)])
    W = GatParams.init(4, rng)
    F = rng.standard_normal((4, 5))
    i = 1
    G = F.copy()
    for j in range(5):
        if j not in nb.neighbors[i]:
            G[:, j] = 0.0
    np.testing.assert_array_equal(gat_forward(Tensor(G), nb, W).data[:, i], gat_forward(Tensor(F), nb, W).data[:, i])


def test_grad_check_on_tree():
    rng = np.random.default_rng(11)
    nb = Neighborhood.from_edges(5, random_tree(rng, 5))
    W = GatParams.init(4, rng)
    F = Tensor(rng.standard_normal((4, 5)))
    C = Tensor(rng.standard_normal((4, 5)))
    assert ad.grad_check(lambda: ad.sum_all(ad.mul(gat_forward(F, nb, W), C)), [W.W]) < 1e-4


def test_multi_layer_multi_head_branch():
    rng = np.random.default_rng(12)
    branch = LocalBranch.init(4, rng, n_layers=2, heads=3)
    assert len(branch.parameters()) == 6
    nb = Neighborhood.from_edges(4, [(0, 1), (0, 2), (2, 3)])
    F = Tensor(rng.standard_normal((4, 4)))
    one = Tensor(gat_forward(F, nb, branch.layers[0][0]).data)
    assert branch(F, nb).shape == (4, 4)
    assert ad.grad_check(lambda: ad.sum_all(ad.mul(branch(F, nb), one)), list(branch.parameters().values())) < 1e-4


def test_shape_checks():
    with pytest.raises(DimensionError):
        GatParams(Tensor(np.zeros((2, 3))))
    with pytest.raises(DimensionError):
        gat_forward(Tensor(np.zeros((3, 2))), Neighborhood.from_edges(3, []), eye(3))
