import numpy as np
import pytest

from graysde import autodiff as ad
from graysde import kernels
from graysde.autodiff import Tape, Tensor
from graysde.kernels import KernelConfig, cmmd2, gram_pair, mmd2, se_gram

from helpers import finite_difference, rel_err


# -- independent oracles (dense, explicit inverse, scalar loops) -------------

def se_oracle(a, b, beta):
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            out[i, j] = np.exp(-np.sum((a[i] - b[j]) ** 2) / (2.0 * beta ** 2))
    return out


def mmd2_oracle(x, y, beta):
    kxx = se_oracle(x, x, beta)
    kxy = se_oracle(x, y, beta)
    kyy = se_oracle(y, y, beta)
    n, m = len(x), len(y)
    return (kxx.sum() / n ** 2 - 2.0 * kxy.sum() / (n * m) + kyy.sum() / m ** 2)


def cmmd2_oracle(it, ot, ip, op, lam, beta_in, beta_out):
    k_d = se_oracle(it, it, beta_in)
    k_s = se_oracle(ip, ip, beta_in)
    k_sd = se_oracle(ip, it, beta_in)
    l_d = se_oracle(ot, ot, beta_out)
    l_s = se_oracle(op, op, beta_out)
    l_ds = se_oracle(ot, op, beta_out)
    d_inv = np.linalg.inv(k_d + lam * np.eye(len(it)))
    s_inv = np.linalg.inv(k_s + lam * np.eye(len(ip)))
    return (np.trace(k_d @ d_inv @ l_d @ d_inv)
            + np.trace(k_s @ s_inv @ l_s @ s_inv)
            - 2.0 * np.trace(k_sd @ d_inv @ l_ds @ s_inv))


# -- squared-exponential gram -------------------------------------------------

def test_gram_self_diagonal_is_one():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(6, 3))
    np.testing.assert_allclose(np.diag(se_gram(a, a, 0.7)), 1.0, atol=1e-12)


def test_gram_at_sqrt2_beta_distance():
    beta = 1.3
    a = np.array([[0.0]])
    b = np.array([[np.sqrt(2.0) * beta]])
    assert se_gram(a, b, beta)[0, 0] == pytest.approx(np.exp(-1.0), rel=1e-12)


def test_gram_matches_double_loop_oracle():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(se_gram(a, b, 0.9), se_oracle(a, b, 0.9),
                               atol=1e-12)


def test_gram_rejects_nonpositive_bandwidth():
    with pytest.raises(ValueError):
        se_gram(np.ones((2, 1)), np.ones((2, 1)), 0.0)
    with pytest.raises(ValueError):
        KernelConfig(bandwidth_in=-1.0)


# -- squared MMD --------------------------------------------------------------

def test_mmd2_identical_samples_is_zero():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(7, 2))
    assert abs(mmd2(x, x, 1.0)) < 1e-12


def test_mmd2_two_points_hand_value():
    beta = 0.8
    x = np.array([[0.0]])
    y = np.array([[np.sqrt(2.0) * beta]])
    assert mmd2(x, y, beta) == pytest.approx(2.0 - 2.0 * np.exp(-1.0), rel=1e-12)


def test_mmd2_matches_triple_sum_oracle():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(5, 2)), rng.normal(size=(3, 2))
    assert abs(mmd2(x, y, 0.6) - mmd2_oracle(x, y, 0.6)) < 1e-12


# -- squared CMMD -------------------------------------------------------------

def test_cmmd2_identical_datasets_is_zero():
    rng = np.random.default_rng(3)
    inputs = rng.normal(size=(5, 2))
    outputs = rng.normal(size=(5, 3))
    val = cmmd2(inputs, outputs, inputs, outputs, 0.05, 1.0, 1.0)
    assert abs(val) < 1e-10


def test_cmmd2_two_sample_toy_case_vs_explicit_inverse():
    it = ip = np.array([[0.0], [1.0]])
    ot = np.array([[0.0], [1.0]])
    op = np.array([[0.0], [2.0]])
    got = cmmd2(it, ot, ip, op, 0.1, 1.0, 1.0)
    want = cmmd2_oracle(it, ot, ip, op, 0.1, 1.0, 1.0)
    assert abs(got - want) < 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_cmmd2_matches_oracle_on_random_instances(seed):
    rng = np.random.default_rng(seed)
    n, p = rng.integers(2, 7), rng.integers(2, 7)
    d_in, d_out = rng.integers(1, 4), rng.integers(1, 4)
    it, ip = rng.normal(size=(n, d_in)), rng.normal(size=(p, d_in))
    ot, op = rng.normal(size=(n, d_out)), rng.normal(size=(p, d_out))
    lam, bi, bo = 10 ** rng.uniform(-2, 1), rng.uniform(0.5, 2), rng.uniform(0.5, 2)
    got = cmmd2(it, ot, ip, op, lam, bi, bo)
    want = cmmd2_oracle(it, ot, ip, op, lam, bi, bo)
    assert abs(got - want) < 1e-10
    assert got > -1e-9   # squared operator distance


def test_cmmd2_symmetric_under_role_swap():
    rng = np.random.default_rng(9)
    it, ip = rng.normal(size=(4, 2)), rng.normal(size=(6, 2))
    ot, op = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
    a = cmmd2(it, ot, ip, op, 0.3, 0.9, 1.1)
    b = cmmd2(ip, op, it, ot, 0.3, 0.9, 1.1)
    assert a == pytest.approx(b, rel=1e-10)


def test_cmmd2_vanishes_for_large_ridge():
    rng = np.random.default_rng(10)
    it, ip = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    ot, op = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    vals = [cmmd2(it, ot, ip, op, lam, 1.0, 1.0) for lam in (1e2, 1e4)]
    assert vals[1] < vals[0] < 1e-2


def test_cmmd2_gradients_match_finite_differences():
    it = ip = np.array([[0.0], [1.0]])
    ot = np.array([[0.0], [1.0]])
    opv = np.array([[0.0], [2.0]])
    log_lam0, log_bi0, log_bo0 = np.log(0.1), 0.0, 0.05

    def f(parts):
        op, loglam, logbi, logbo = parts
        return cmmd2_oracle(it, ot, ip, op, np.exp(loglam[0]),
                            np.exp(logbi[0]), np.exp(logbo[0]))

    params = [opv.copy(), np.array([log_lam0]), np.array([log_bi0]),
              np.array([log_bo0])]
    tensors = [Tensor(p.copy(), requires_grad=True) for p in params]
    with Tape() as tape:
        loss = cmmd2(it, ot, ip, tensors[0], ad.exp(tensors[1]),
                     ad.exp(tensors[2]), ad.exp(tensors[3]))
    tape.backward(loss)
    fd = finite_difference(f, params, h=1e-6)
    assert rel_err(tensors[0].grad, fd[0]) < 1e-5
    for t, g in zip(tensors[1:], fd[1:]):
        assert rel_err(t.grad, g) < 1e-5


def test_gram_pair_shapes_and_ridge():
    rng = np.random.default_rng(5)
    pair = gram_pair(rng.normal(size=(4, 2)), rng.normal(size=(4, 3)),
                     KernelConfig(1.0, 1.0, 0.5))
    np.testing.assert_allclose(pair.k_reg - pair.k, 0.5 * np.eye(4), atol=1e-14)
    np.testing.assert_allclose(pair.l, pair.l.T, atol=1e-14)
    assert np.all(np.linalg.eigvalsh(pair.k_reg) > 0)


def test_median_sqdist_heuristic():
    rows = np.array([[0.0], [1.0], [2.0]])
    # pairwise squared distances: 1, 1, 4 -> median 1
    assert kernels.median_sqdist(rows) == pytest.approx(1.0)
    assert kernels.median_sqdist(np.zeros((3, 2))) == 1.0  # degenerate fallback
