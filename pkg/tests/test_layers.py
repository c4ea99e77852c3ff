import math

import numpy as np
import pytest
from hypothesis import given, settings

from poolprobe import autodiff as ad
from poolprobe.autodiff import Tensor
from poolprobe.clustering import invariant_random_assignment
from poolprobe.errors import ContractError, DimensionError
from poolprobe.layers import (FEATURE_NORM_EPS, ConvParams, DiffPoolParams, GmnLayerParams,
                              MlpParams, basic_conv, diffpool_layer, feature_norm,
                              global_mean_readout, gmn_kernel_assign, gmn_memory_layer,
                              init_conv, init_mlp, mlp_head)

from gradcheck import max_rel_error
from graphgen import graph_and_perm, random_graph


def conv(w1, w2):
    return ConvParams(Tensor(w1, trainable=True), Tensor(w2, trainable=True))


def softmax_np(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def conv_np(a, x, w1, w2, relu=True):
    out = x @ w1 + a @ x @ w2
    return np.maximum(out, 0) if relu else out


def test_basic_conv_examples():
    x = np.abs(np.random.default_rng(0).normal(size=(3, 2)))
    out = basic_conv(np.zeros((3, 3)), x, conv(np.eye(2), np.eye(2)))
    assert np.allclose(out.data, x)
    out = basic_conv([[0, 1], [1, 0]], [[1], [1]], conv([[1]], [[1]]))
    assert np.array_equal(out.data, [[2], [2]])
    with pytest.raises(ContractError):
        basic_conv(np.zeros((3, 3)), np.ones((2, 2)), conv(np.eye(2), np.eye(2)))
    with pytest.raises(DimensionError):
        basic_conv(np.zeros((2, 2)), np.ones((2, 3)), conv(np.eye(2), np.eye(2)))


def test_basic_conv_gradient():
    rng = np.random.default_rng(1)
    g = random_graph(rng, 5)
    p = init_conv(rng, 3, 4)
    x = Tensor(g.features, trainable=True)
    wts = Tensor(rng.normal(size=(5, 4)))
    loss = lambda: ad.sum_all(ad.mul(basic_conv(g.adjacency, x, p), wts))  # noqa: E731
    assert max_rel_error(loss, p.tensors() + [x]) < 1e-4


@settings(max_examples=40, deadline=None)
@given(graph_and_perm(min_n=1, max_n=9))
def test_basic_conv_equivariant(gp):
    g, perm = gp
    p = init_conv(np.random.default_rng(0), g.d, 3)
    base = basic_conv(g.adjacency, g.features, p).data
    moved = basic_conv(g.adjacency[np.ix_(perm, perm)], g.features[perm], p).data
    assert np.allclose(moved, base[perm], atol=1e-10)


def _diffpool(rng, d=3, k=2, hidden=4):
    return DiffPoolParams(init_conv(rng, d, k, "g1"), init_conv(rng, d, hidden, "g2"), k)


def test_diffpool_near_identity_override():
    rng = np.random.default_rng(2)
    g = random_graph(rng, 4)
    p = _diffpool(rng, k=4)
    a2, x2, s = diffpool_layer(g.adjacency, g.features, p, override_s=50 * np.eye(4))
    assert np.allclose(s.data, np.eye(4), atol=1e-12)
    assert np.allclose(x2.data, basic_conv(g.adjacency, g.features, p.gnn2).data, atol=1e-12)
    assert np.allclose(a2.data, g.adjacency, atol=1e-12)


def test_diffpool_zero_override_gives_identical_clusters():
    rng = np.random.default_rng(3)
    g = random_graph(rng, 5)
    p = _diffpool(rng, k=3)
    _, x2, s = diffpool_layer(g.adjacency, g.features, p, override_s=np.zeros((7, 3)))
    assert np.allclose(s.data, 1 / 3)
    assert np.allclose(x2.data, x2.data[0], atol=1e-14)


def test_diffpool_learned_path_matches_composition():
    rng = np.random.default_rng(4)
    g = random_graph(rng, 4)
    p = _diffpool(rng, k=2)
    a2, x2, s = diffpool_layer(g.adjacency, g.features, p)
    a, x = g.adjacency, g.features
    s_ref = softmax_np(conv_np(a, x, p.gnn1.w1.data, p.gnn1.w2.data, relu=False))
    h = conv_np(a, x, p.gnn2.w1.data, p.gnn2.w2.data)
    assert np.allclose(s.data, s_ref, atol=1e-12)
    assert np.allclose(x2.data, s_ref.T @ h, atol=1e-12)
    assert np.allclose(a2.data, s_ref.T @ a @ s_ref, atol=1e-12)


def test_diffpool_override_contracts_and_gradient_block():
    rng = np.random.default_rng(5)
    g = random_graph(rng, 5)
    p = _diffpool(rng, k=3)
    with pytest.raises(ContractError):
        diffpool_layer(g.adjacency, g.features, p, override_s=np.zeros((4, 3)))
    with pytest.raises(ContractError):
        diffpool_layer(g.adjacency, g.features, p, override_s=np.zeros((5, 2)))
    with ad.Tape() as tape:
        _, x2, _ = diffpool_layer(g.adjacency, g.features, p, override_s=rng.normal(size=(5, 3)))
        tape.backward(ad.sum_all(x2))
    assert p.gnn1.w1.grad is None and p.gnn2.w1.grad is not None


def test_diffpool_learned_is_invariant():
    rng = np.random.default_rng(6)
    p = _diffpool(rng, k=3)
    for _ in range(10):
        g = random_graph(rng, int(rng.integers(2, 12)))
        a2, x2, _ = diffpool_layer(g.adjacency, g.features, p)
        perm = rng.permutation(g.n)
        b2, y2, _ = diffpool_layer(g.adjacency[np.ix_(perm, perm)], g.features[perm], p)
        assert np.allclose(x2.data, y2.data, atol=1e-9)
        assert np.allclose(a2.data, b2.data, atol=1e-9)


def test_diffpool_invariant_random_vs_plain_random():
    rng = np.random.default_rng(7)
    p = _diffpool(rng, k=3)
    s_prime = rng.normal(size=(3, 3))
    plain = rng.normal(size=(12, 3))
    worst_plain = 0.0
    for _ in range(10):
        g = random_graph(rng, 10)
        perm = rng.permutation(g.n)
        pg_a, pg_x = g.adjacency[np.ix_(perm, perm)], g.features[perm]
        _, x2, _ = diffpool_layer(g.adjacency, g.features, p,
                                  invariant_random_assignment(g.features, s_prime))
        _, y2, _ = diffpool_layer(pg_a, pg_x, p, invariant_random_assignment(pg_x, s_prime))
        assert np.abs(x2.data - y2.data).max() <= 1e-9
        _, u2, _ = diffpool_layer(g.adjacency, g.features, p, plain)
        _, v2, _ = diffpool_layer(pg_a, pg_x, p, plain)
        worst_plain = max(worst_plain, np.abs(u2.data - v2.data).max())
    assert worst_plain > 1e-3


def test_kernel_assign_examples():
    q = Tensor([[0.0, 0.0]])
    raw = lambda keys: ad.power(ad.shift(ad.sq_dists(q, Tensor(keys)), 1.0), -1.0)  # noqa: E731
    assert raw([[0.0, 0.0]]).item() == 1.0
    assert raw([[1.0, 0.0]]).item() == 0.5
    s = gmn_kernel_assign(q, Tensor([[1.0, 0.0], [0.0, -1.0]]), 1.0)
    assert np.allclose(s.data, [[0.5, 0.5]])
    with pytest.raises(ContractError):
        gmn_kernel_assign(q, Tensor([[1.0, 0.0]]), 0.0)


def test_kernel_assign_formula_and_rows():
    rng = np.random.default_rng(8)
    q, k, tau = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), 2.5
    d2 = ((q[:, None, :] - k[None, :, :]) ** 2).sum(-1)
    u = (1 + d2 / tau) ** (-(tau + 1) / 2)
    s = gmn_kernel_assign(Tensor(q), Tensor(k), tau).data
    assert np.allclose(s, u / u.sum(axis=1, keepdims=True), atol=1e-14)
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-12)


def _gmn(rng, variant, d=3, k=2, heads=2, n_max=10, tau=1.0):
    if variant == "random":
        return GmnLayerParams([], Tensor(np.ones((1, 0))), Tensor(rng.normal(size=(d, d)), True),
                              tau, "random", Tensor(rng.random((n_max, k))))
    keys = [Tensor(rng.random((k, d)) if variant == "distance" else rng.normal(size=(k, d)),
                   trainable=variant == "kernel") for _ in range(heads)]
    return GmnLayerParams(keys, Tensor(rng.normal(size=(1, heads)), True),
                          Tensor(rng.normal(size=(d, d)), True), tau, variant)


def test_gmn_params_contracts():
    rng = np.random.default_rng(9)
    w = Tensor(np.eye(2), True)
    with pytest.raises(ContractError):
        GmnLayerParams([], Tensor(np.ones((1, 0))), w, 1.0, "random")
    with pytest.raises(ContractError):
        GmnLayerParams([Tensor(rng.random((2, 2)), True)], Tensor([[1.0]]), w, 1.0, "distance")
    with pytest.raises(ContractError):
        GmnLayerParams([Tensor(rng.random((2, 2)))], Tensor([[1.0]]), w, -1.0, "kernel")
    with pytest.raises(ContractError):
        GmnLayerParams([Tensor(rng.random((2, 2)))], Tensor([[1.0]]), w, 1.0, "attention")


def test_gmn_identical_keys_give_uniform_rows():
    q = Tensor(np.random.default_rng(10).normal(size=(4, 2)))
    key = np.zeros((3, 2))
    p = GmnLayerParams([Tensor(key, True)], Tensor([[1.0]], True), Tensor(np.eye(2), True), 1.0)
    _, s = gmn_memory_layer(q, p)
    assert np.allclose(s.data, 1 / 3)


def test_gmn_random_near_identity():
    q = np.abs(np.random.default_rng(11).normal(size=(4, 3)))
    p = GmnLayerParams([], Tensor(np.ones((1, 0))), Tensor(np.eye(3), True), 1.0, "random",
                       Tensor(60 * np.eye(6)[:, :4]))
    out, s = gmn_memory_layer(q, p)
    assert np.allclose(out.data, q, atol=1e-12)
    p.fixed_assignment = Tensor(np.zeros((3, 4)))
    with pytest.raises(ContractError):
        gmn_memory_layer(q, p)


def test_gmn_kernel_matches_composition():
    rng = np.random.default_rng(12)
    p = _gmn(rng, "kernel")
    q = rng.normal(size=(4, 3))
    out, s = gmn_memory_layer(Tensor(q), p)
    mixed = sum(p.head_weights.data[0, h] * gmn_kernel_assign(Tensor(q), p.keys[h], p.tau).data
                for h in range(2))
    s_ref = softmax_np(mixed)
    assert np.allclose(s.data, s_ref, atol=1e-12)
    assert np.allclose(out.data, np.maximum(s_ref.T @ q @ p.w.data, 0), atol=1e-12)


def test_gmn_distance_uses_negated_distance():
    rng = np.random.default_rng(13)
    p = _gmn(rng, "distance", heads=1)
    q = rng.normal(size=(3, 3))
    _, s = gmn_memory_layer(Tensor(q), p)
    dist = np.sqrt(((q[:, None] - p.keys[0].data[None]) ** 2).sum(-1))
    assert np.allclose(s.data, softmax_np(-p.head_weights.data[0, 0] * dist), atol=1e-9)


@pytest.mark.parametrize("variant", ["kernel", "distance"])
def test_gmn_invariant(variant):
    rng = np.random.default_rng(14)
    p = _gmn(rng, variant)
    for _ in range(10):
        q = rng.normal(size=(int(rng.integers(2, 12)), 3))
        perm = rng.permutation(q.shape[0])
        a, _ = gmn_memory_layer(Tensor(q), p)
        b, _ = gmn_memory_layer(Tensor(q[perm]), p)
        assert np.abs(a.data - b.data).max() <= 1e-9


def test_gmn_random_invariant_with_projected_assignment():
    rng = np.random.default_rng(15)
    w = Tensor(rng.normal(size=(3, 3)), True)
    s_prime = rng.normal(size=(3, 2))
    for _ in range(10):
        q = rng.normal(size=(8, 3))
        perm = rng.permutation(8)
        outs = []
        for qq in (q, q[perm]):
            fixed = invariant_random_assignment(qq, s_prime)
            p = GmnLayerParams([], Tensor(np.ones((1, 0))), w, 1.0, "random", fixed)
            outs.append(gmn_memory_layer(Tensor(qq), p)[0].data)
        assert np.abs(outs[0] - outs[1]).max() <= 1e-9


@pytest.mark.parametrize("variant", ["kernel", "distance", "random"])
def test_gmn_gradients(variant):
    rng = np.random.default_rng(16)
    p = _gmn(rng, variant, tau=1.7)
    q = Tensor(rng.normal(size=(5, 3)), trainable=True)
    params = [t for t in p.tensors() if t.trainable] + [q]
    # a plain sum would hide the assignment path: S rows sum to one
    wts = Tensor(rng.normal(size=(p.k, 3)))
    loss = lambda: ad.sum_all(ad.mul(gmn_memory_layer(q, p)[0], wts))  # noqa: E731
    assert max_rel_error(loss, params) < 1e-4


def test_feature_norm_examples():
    out = feature_norm([[1.0, 0.0], [1.0, 2.0]]).data
    assert np.array_equal(out[:, 0], [0, 0])
    c = 1 / math.sqrt(1 + FEATURE_NORM_EPS)
    assert np.allclose(out[:, 1], [-c, c], atol=1e-15)
    assert np.allclose(out[:, 1], [-1, 1], atol=1e-5)


def test_feature_norm_moments():
    rng = np.random.default_rng(17)
    for _ in range(10):
        x = rng.normal(scale=rng.uniform(0.5, 5), size=(int(rng.integers(2, 20)), 4))
        out = feature_norm(x).data
        var = x.var(axis=0)
        assert np.allclose(out.mean(axis=0), 0, atol=1e-12)
        # exact oracle: the epsilon inside the square root shrinks the variance slightly
        assert np.allclose(out.var(axis=0), var / (var + FEATURE_NORM_EPS), atol=1e-12)


def test_feature_norm_gradient():
    rng = np.random.default_rng(18)
    x = Tensor(rng.normal(size=(6, 3)), trainable=True)
    wts = Tensor(rng.normal(size=(6, 3)))
    assert max_rel_error(lambda: ad.sum_all(ad.mul(feature_norm(x), wts)), [x]) < 1e-4


def test_readout():
    assert np.array_equal(global_mean_readout([[1.0, 2.0]]).data, [[1, 2]])
    assert global_mean_readout([[0.0], [2.0]]).item() == 1
    x = np.random.default_rng(19).normal(size=(7, 3))
    perm = np.random.default_rng(20).permutation(7)
    assert np.allclose(global_mean_readout(x).data, global_mean_readout(x[perm]).data, atol=1e-12)


def test_mlp_head():
    zero = MlpParams(*(Tensor(np.zeros(s), True) for s in [(2, 3), (1, 3), (3, 1), (1, 1)]))
    assert not mlp_head([[1.0, 2.0]], zero).data.any()
    one = MlpParams(Tensor([[1.0]]), Tensor([[0.0]]), Tensor([[1.0]]), Tensor([[0.0]]))
    assert mlp_head([[2.5]], one).item() == 2.5
    with pytest.raises(DimensionError):
        mlp_head([[1.0, 2.0, 3.0]], zero)
    rng = np.random.default_rng(21)
    p = init_mlp(rng, 4, 5, 3)
    p.b1.data[:] = rng.normal(size=(1, 5))
    x = Tensor(rng.normal(size=(1, 4)), trainable=True)
    assert max_rel_error(lambda: ad.sum_all(ad.mul(mlp_head(x, p), Tensor([[1.0, -2.0, 0.5]]))),
                         p.tensors() + [x]) < 1e-4
