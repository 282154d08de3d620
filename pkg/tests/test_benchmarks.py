import numpy as np
import pytest

from graysde.benchmarks import (BENCHMARK_NAMES, REGIMES, ConfigurationError,
                                make_benchmark)


def _eval_cols(fn, state, params, t=0.0):
    cols = [np.atleast_1d(np.asarray(c, dtype=float)) for c in state]
    pcols = [np.atleast_1d(np.asarray(c, dtype=float)) for c in params]
    return np.stack([np.asarray(c) for c in fn(cols, pcols, t)], axis=-1)[0]


def test_unknown_name_and_regime_raise():
    with pytest.raises(ConfigurationError):
        make_benchmark("heston")
    with pytest.raises(ConfigurationError):
        make_benchmark("sir").known_model("volatility_missing")


def test_black_scholes_true_drift_value():
    spec = make_benchmark("black_scholes")
    out = _eval_cols(spec.true_model.drift, [2.0], [0.1, 0.3])
    assert out[0] == pytest.approx(0.2)


def test_black_scholes_known_drift_is_constant():
    spec = make_benchmark("black_scholes")
    known = spec.known_model("drift_missing")
    out = _eval_cols(known.drift, [2.0], [0.1, 0.3])
    assert out[0] == 1.0
    # diffusion is untouched in the drift-missing regime
    d_true = _eval_cols(spec.true_model.diffusion, [2.0], [0.1, 0.3])
    d_known = _eval_cols(known.diffusion, [2.0], [0.1, 0.3])
    np.testing.assert_array_equal(d_true, d_known)


def test_sir_drift_conserves_population():
    spec = make_benchmark("sir")
    rng = np.random.default_rng(0)
    for _ in range(20):
        s, i, r = rng.uniform(0, 2000, size=3)
        out = _eval_cols(spec.true_model.drift, [s, i, r], [s, i])
        assert abs(out.sum()) < 1e-9 * max(abs(out).max(), 1.0)


def test_duffing_vdp_ablated_drift_hand_value():
    spec = make_benchmark("duffing_vdp")
    known = spec.known_model("drift_missing")
    out = _eval_cols(known.drift, [1.0, 1.0], [0.2, 10.0])
    assert out[0] == pytest.approx(1.0)
    assert out[1] == pytest.approx(0.2 + 10.0 - 100.0)   # = -89.8


def test_duffing_vdp_true_self_limiting_term():
    spec = make_benchmark("duffing_vdp")
    out = _eval_cols(spec.true_model.drift, [2.0, 3.0], [0.2, 10.0])
    # xi1 (1 - X^2) Y + xi2 X - alpha X^3
    assert out[1] == pytest.approx(0.2 * (1 - 4.0) * 3.0 + 20.0 - 800.0)


@pytest.mark.parametrize("name", BENCHMARK_NAMES)
def test_known_models_agree_on_non_ablated_terms(name):
    spec = make_benchmark(name)
    rng = np.random.default_rng(7)
    d, k = spec.true_model.dim_state, spec.true_model.dim_params
    for _ in range(10):
        state = list(rng.uniform(0.5, 2.0, size=d))
        params = list(spec.param_space.sample(rng, 1)[0])
        f_true = _eval_cols(spec.true_model.drift, state, params)
        g_true = _eval_cols(spec.true_model.diffusion, state, params)
        drift_ablated = spec.known_model("drift_missing")
        np.testing.assert_array_equal(
            _eval_cols(drift_ablated.diffusion, state, params), g_true)
        diff_ablated = spec.known_model("diffusion_missing")
        np.testing.assert_array_equal(
            _eval_cols(diff_ablated.drift, state, params), f_true)
        # components other than the ablated one keep the true drift
        f_known = _eval_cols(drift_ablated.drift, state, params)
        for c in range(d):
            if c != spec.correction_index:
                assert f_known[c] == f_true[c]


@pytest.mark.parametrize("name", BENCHMARK_NAMES)
def test_param_space_bounds_and_shapes(name):
    spec = make_benchmark(name)
    rng = np.random.default_rng(1)
    draws = spec.param_space.sample(rng, 200)
    assert draws.shape == (200, spec.true_model.dim_params)
    for j, (lo, hi) in enumerate(spec.param_space.bounds):
        assert draws[:, j].min() >= lo and draws[:, j].max() <= hi


def test_qoi_projections():
    bs = make_benchmark("black_scholes")
    traj = np.arange(8.0).reshape(2, 4, 1)
    np.testing.assert_array_equal(bs.qoi(traj), traj[..., 0])

    dvdp = make_benchmark("duffing_vdp")
    traj2 = np.stack([-np.ones((2, 4)), np.ones((2, 4))], axis=-1)
    np.testing.assert_array_equal(dvdp.qoi(traj2), np.ones((2, 4)))

    sir = make_benchmark("sir")
    traj3 = np.arange(12.0).reshape(2, 2, 3)
    np.testing.assert_array_equal(sir.qoi(traj3), traj3[..., 1])


def test_training_defaults_match_experiment_settings():
    bs = make_benchmark("black_scholes")
    assert (bs.dt, bs.n_steps) == (1e-3, 100)
    assert bs.lr_schedule("drift_missing") == (1e-5, 1.0, 50)
    assert (bs.n_samples_default, bs.n_replications_default) == (40, 50)

    mou = make_benchmark("modified_ou")
    assert mou.lr_schedule("drift_missing") == (1e-4, 0.95, 50)

    sir = make_benchmark("sir")
    assert sir.lr_schedule("diffusion_missing") == (1e-6, 0.9, 50)

    dvdp = make_benchmark("duffing_vdp")
    assert dvdp.n_steps == 1000
    assert dvdp.lr_schedule("drift_missing") == (1e-6, 0.95, 50)
    assert dvdp.lr_schedule("diffusion_missing") == (1e-5, 0.95, 50)
