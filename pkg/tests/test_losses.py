import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from poolprobe import autodiff as ad
from poolprobe.autodiff import Tape, Tensor
from poolprobe.errors import ConfigError, ContractError, DimensionError
from poolprobe.losses import (LossWeights, UpdateMask, cross_entropy, entropy_loss,
                              kl_purity_loss, link_prediction_loss, mae, total_loss)

from gradcheck import max_rel_error


def stochastic(rng, n, k):
    z = rng.random((n, k)) + 0.05
    return z / z.sum(axis=1, keepdims=True)


def kl_oracle(s):
    """Two-pass loop evaluation of the purity divergence."""
    n, k = s.shape
    freq = [sum(s[i, j] for i in range(n)) for j in range(k)]
    total = 0.0
    for i in range(n):
        row = [s[i, j] ** 2 / freq[j] for j in range(k)]
        z = sum(row)
        for j in range(k):
            p = row[j] / z
            if p > 0:
                total += p * math.log(p / s[i, j])
    return total


def test_cross_entropy_examples():
    assert math.isclose(cross_entropy(Tensor([[0.0, 0.0]]), 1).item(), math.log(2))
    assert cross_entropy(Tensor([[100.0, -100.0]]), 0).item() < 1e-12
    z = np.random.default_rng(0).normal(size=(1, 4))
    direct = -math.log(math.exp(z[0, 2]) / np.exp(z).sum())
    assert math.isclose(cross_entropy(Tensor(z), 2).item(), direct, rel_tol=1e-12)
    with pytest.raises(ContractError):
        cross_entropy(Tensor(z), 4)


def test_mae_examples_and_subgradient():
    assert mae(Tensor([[2.0]]), 2.0).item() == 0
    assert mae(Tensor([[1.0]]), 3.0).item() == 2
    for value, want in ((1.0, -1.0), (5.0, 1.0), (3.0, 0.0)):
        p = Tensor([[value]], trainable=True)
        with Tape() as tape:
            tape.backward(mae(p, 3.0))
        assert p.grad.item() == want
    with pytest.raises(DimensionError):
        mae(Tensor([[1.0, 2.0]]), 0.0)


def test_link_loss_examples():
    assert link_prediction_loss(Tensor(np.eye(3)), Tensor(np.eye(3))).item() == 0
    assert link_prediction_loss(Tensor([[0.0, 1.0], [1.0, 0.0]]), Tensor(np.eye(2))).item() == 0.5
    assert link_prediction_loss(Tensor([[0.0, 1.0], [1.0, 0.0]]), Tensor(np.eye(2)),
                                normalize=False).item() == 2.0
    rng = np.random.default_rng(1)
    a, s = rng.integers(0, 2, size=(4, 4)).astype(float), stochastic(rng, 4, 2)
    loop = math.sqrt(sum((a[i, j] - sum(s[i, c] * s[j, c] for c in range(2))) ** 2
                         for i in range(4) for j in range(4))) / 16
    assert math.isclose(link_prediction_loss(Tensor(a), Tensor(s)).item(), loop, rel_tol=1e-12)
    with pytest.raises(DimensionError):
        link_prediction_loss(Tensor(np.eye(3)), Tensor(np.eye(2)))


def test_entropy_examples():
    assert entropy_loss(Tensor(np.eye(3))).item() < 1e-10
    assert math.isclose(entropy_loss(Tensor(np.full((4, 5), 0.2))).item(), math.log(5), rel_tol=1e-10)
    s = stochastic(np.random.default_rng(2), 5, 3)
    oracle = -np.mean([sum(v * math.log(v + 1e-12) for v in row) for row in s])
    assert math.isclose(entropy_loss(Tensor(s)).item(), oracle, rel_tol=1e-12)


def test_kl_examples():
    for n in range(1, 9):
        for k in range(1, 9):
            assert abs(kl_purity_loss(Tensor(np.full((n, k), 1.0 / k))).item()) <= 1e-10
    one_hot = Tensor(np.eye(3)[[0, 1, 2, 0, 1, 2]])
    assert abs(kl_purity_loss(one_hot).item()) <= 1e-10
    s = stochastic(np.random.default_rng(3), 4, 2)
    assert math.isclose(kl_purity_loss(Tensor(s)).item(), kl_oracle(s), rel_tol=1e-10, abs_tol=1e-14)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 6)),
              elements=st.floats(0.01, 10)))
def test_kl_nonnegative_and_entropy_bounded(raw):
    s = raw / raw.sum(axis=1, keepdims=True)
    assert kl_purity_loss(Tensor(s)).item() >= -1e-10
    assert -1e-10 <= entropy_loss(Tensor(s)).item() <= math.log(s.shape[1]) + 1e-9


@pytest.mark.parametrize("name", ["cross_entropy", "mae", "link", "entropy", "kl"])
def test_loss_gradients(name):
    rng = np.random.default_rng(4)
    for _ in range(5):
        z = Tensor(rng.normal(size=(5, 3)), trainable=True)
        a = Tensor(rng.integers(0, 2, size=(5, 5)).astype(float))
        fn = {
            "cross_entropy": lambda: cross_entropy(ad.slice_rows(z, 0, 1), 1),
            "mae": lambda: mae(ad.pick(z, 0, 0), 0.3),
            "link": lambda: link_prediction_loss(a, ad.softmax_rows(z)),
            "entropy": lambda: entropy_loss(ad.softmax_rows(z)),
            "kl": lambda: kl_purity_loss(ad.softmax_rows(z)),
        }[name]
        assert max_rel_error(fn, [z]) < 1e-4


def test_loss_weights_validation():
    with pytest.raises(ConfigError) as err:
        LossWeights(lambda_link=-1)
    assert "lambda_link" in err.value.fields
    with pytest.raises(ConfigError):
        LossWeights(gmn_update_period=0)
    with pytest.raises(ConfigError):
        LossWeights(gmn_schedule="sometimes")


def _aux(rng):
    return [{"adjacency": Tensor(np.eye(4)), "assignment": Tensor(stochastic(rng, 4, 2))}]


def test_total_loss_diffpool():
    rng = np.random.default_rng(5)
    sup = Tensor([[0.7]])
    aux = _aux(rng)
    loss, mask = total_loss(sup, aux, LossWeights(0.0, 0.0), 1, "diffpool")
    assert loss.item() == 0.7 and mask is UpdateMask.ALL
    w = LossWeights(1000.0, 2.0)
    loss, _ = total_loss(sup, aux, w, 1, "diffpool")
    want = 0.7 + 1000 * link_prediction_loss(aux[0]["adjacency"], aux[0]["assignment"]).item() \
        + 2 * entropy_loss(aux[0]["assignment"]).item()
    assert math.isclose(loss.item(), want, rel_tol=1e-12)


def test_total_loss_gmn_alternation():
    rng = np.random.default_rng(6)
    sup, aux, w = Tensor([[0.7]]), _aux(rng), LossWeights(gmn_update_period=5)
    loss, mask = total_loss(sup, aux, w, 5, "gmn")
    assert mask is UpdateMask.KEYS_ONLY
    assert math.isclose(loss.item(), kl_purity_loss(aux[0]["assignment"]).item())
    for epoch in (1, 4, 6):
        loss, mask = total_loss(sup, aux, w, epoch, "gmn")
        assert mask is UpdateMask.EXCEPT_KEYS and loss is sup
    assert total_loss(sup, [], w, 10, "gmn")[0].item() == 0.0
    combined = LossWeights(gmn_kl_weight=0.5, gmn_schedule="combined")
    loss, mask = total_loss(sup, aux, combined, 5, "gmn")
    assert mask is UpdateMask.ALL
    assert math.isclose(loss.item(), 0.7 + 0.5 * kl_purity_loss(aux[0]["assignment"]).item())


def test_update_mask():
    assert UpdateMask.ALL.allows(True) and UpdateMask.ALL.allows(False)
    assert UpdateMask.KEYS_ONLY.allows(True) and not UpdateMask.KEYS_ONLY.allows(False)
    assert UpdateMask.EXCEPT_KEYS.allows(False) and not UpdateMask.EXCEPT_KEYS.allows(True)
