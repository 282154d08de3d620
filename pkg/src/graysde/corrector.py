"""Gray-box SDE surrogate: known physics plus a learned generative correction.

The estimator wraps a mis-specified ("known") drift/diffusion pair and a
correction network that outputs a pseudo-drift and pseudo-diffusion for the
corrected state component at every integrator step:

    X[t+1] = X[t] + (f_k(X, xi) + f_pseudo) * dt + (g_k(X, xi) + g_pseudo) (*) dB

with f_pseudo, g_pseudo the two heads of an MLP evaluated on the standardized
state, the standardized parameter vector, and a fresh standard-normal latent
draw.  Training backpropagates a conditional kernel two-sample loss between
data trajectories and rollout trajectories through the full time loop.

Setting ``physics="none"`` trains the identical architecture with both
physics terms zeroed, which is the purely data-driven reference model.
"""

from __future__ import annotations

import csv
import logging
import time

import numpy as np
from sklearn.base import BaseEstimator

from graysde import autodiff as ad
from graysde import nn
from graysde.autodiff import Tape, Tensor
from graysde.benchmarks import BenchmarkSpec, make_benchmark
from graysde.kernels import cmmd2, median_sqdist
from graysde.sde import (IntegrationDivergenceError, SdeModel,
                         TrajectoryDataset, brownian_block, latent_stream)

logger = logging.getLogger(__name__)

_STD_FLOOR = 1e-12


class TrainingAbortedError(RuntimeError):
    """Too many consecutive non-finite losses; training cannot proceed."""


def zero_physics_like(model):
    """A model of the same dimensions whose drift and diffusion are zero."""
    def zeros(x, p, t):
        return tuple(c * 0.0 for c in x)
    return SdeModel(model.dim_state, model.dim_params, zeros, zeros,
                    label=model.label + ":zero_physics")


def corrector_step(model, state_cols, param_cols, t, dt, db_cols,
                   f_pseudo, g_pseudo, index):
    """One corrected Euler-Maruyama update on column lists.

    The pseudo terms are added to the known drift and diffusion of component
    ``index`` only; with both pseudo terms zero this reduces to the plain
    integrator step on the known model.
    """
    f = model.drift(state_cols, param_cols, t)
    g = model.diffusion(state_cols, param_cols, t)
    out = []
    for c in range(model.dim_state):
        fc = f[c] + f_pseudo if c == index else f[c]
        gc = g[c] + g_pseudo if c == index else g[c]
        out.append(state_cols[c] + fc * dt + gc * db_cols[c])
    return out


class DeepPhysicsCorrector(BaseEstimator):
    """Physics-corrected stochastic-simulator surrogate.

    Parameters mirror the experiment defaults of the named benchmark; any of
    them can be overridden.  ``fit`` consumes a parameter matrix ``X`` of
    shape (N, k) and a trajectory array ``y`` of shape (N, m, n_steps+1,
    dim_state) generated from the true system.

    Attributes ending in ``_`` are set by :meth:`fit`; ``loss_history_``
    holds the per-epoch mean training loss and ``history_`` the full trace
    (learning rate, ridge, bandwidths, wall time).
    """

    def __init__(self, benchmark="black_scholes", regime="drift_missing",
                 physics="known", dt=None, epochs=2000, batch_size=None,
                 lr=None, lr_decay=None, lr_period=50, latent_dim=10,
                 hidden_layers=nn.HIDDEN_LAYERS, lambda_init=0.01,
                 beta_in_init=1.0, beta_out_init="median",
                 plateau_epochs=200, plateau_tol=1e-4, max_nonfinite=3,
                 warm_start=False, random_state=0, log_path=None):
        self.benchmark = benchmark
        self.regime = regime
        self.physics = physics
        self.dt = dt
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_period = lr_period
        self.latent_dim = latent_dim
        self.hidden_layers = hidden_layers
        self.lambda_init = lambda_init
        self.beta_in_init = beta_in_init
        self.beta_out_init = beta_out_init
        self.plateau_epochs = plateau_epochs
        self.plateau_tol = plateau_tol
        self.max_nonfinite = max_nonfinite
        self.warm_start = warm_start
        self.random_state = random_state
        self.log_path = log_path

    # -- configuration plumbing ------------------------------------------

    def _spec(self):
        if isinstance(self.benchmark, BenchmarkSpec):
            return self.benchmark
        return make_benchmark(self.benchmark)

    def _resolve(self, spec):
        if self.physics not in ("known", "none"):
            raise ValueError("physics must be 'known' or 'none'")
        known = spec.known_model(self.regime)
        if self.physics == "none":
            known = zero_physics_like(known)
        lr0, decay, period = spec.lr_schedule(self.regime)
        return {
            "known": known,
            "dt": self.dt if self.dt is not None else spec.dt,
            "batch": self.batch_size or spec.batch_size_default,
            "lr0": self.lr if self.lr is not None else lr0,
            "decay": self.lr_decay if self.lr_decay is not None else decay,
            "period": self.lr_period,
        }

    # -- fitting ----------------------------------------------------------

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        spec = self._spec()
        setup = self._resolve(spec)
        self._validate_fit_args(X, y, spec, setup)
        n_total, m = y.shape[0], y.shape[1]
        n_steps = y.shape[2] - 1
        dt = setup["dt"]

        fresh = not (self.warm_start and hasattr(self, "weights_"))
        if fresh:
            self._initialize(X, y, spec, setup, n_steps, dt)

        lam_leaf = np.array(np.log(self.lambda_init)) if fresh else \
            np.array(self.log_lambda_)
        bi_leaf = np.array(np.log(self.beta_in_init)) if fresh else \
            np.array(self.log_beta_in_)
        bo_leaf = np.array(np.log(self._beta_out0(X, y, spec, setup, n_steps, dt))) \
            if fresh else np.array(self.log_beta_out_)
        flat = [a for pair in self.weights_ for a in pair]
        flat += [lam_leaf, bi_leaf, bo_leaf]
        if fresh:
            self.adam_ = nn.AdamState.for_params(flat)
            self.loss_history_ = []
            self.history_ = {"lr": [], "lambda": [], "beta_in": [],
                             "beta_out": [], "wall": []}
            self.n_epochs_ = 0
            self.n_skipped_ = 0

        log_writer = self._open_log() if self.log_path else None
        batch = setup["batch"]
        n_batches = -(-n_total // batch)
        consecutive_bad = 0
        try:
            for epoch in range(self.n_epochs_, self.epochs):
                lr = nn.step_decay(setup["lr0"], setup["decay"],
                                   setup["period"], epoch)
                order = np.random.default_rng(np.random.SeedSequence(
                    self.random_state, spawn_key=(4, epoch))).permutation(n_total)
                t0 = time.perf_counter()
                losses = []
                for b in range(n_batches):
                    idx = order[b * batch:(b + 1) * batch]
                    loss = self._train_batch(X, y, idx, spec, setup, flat,
                                             epoch, b, lr, n_steps, dt)
                    if loss is None:
                        consecutive_bad += 1
                        self.n_skipped_ += 1
                        if consecutive_bad >= self.max_nonfinite:
                            raise TrainingAbortedError(
                                f"{consecutive_bad} consecutive non-finite "
                                f"losses at epoch {epoch}")
                        continue
                    consecutive_bad = 0
                    losses.append(loss)
                wall = time.perf_counter() - t0
                mean_loss = float(np.mean(losses)) if losses else np.nan
                with np.errstate(over="ignore"):
                    lam_v, bi_v, bo_v = (float(np.exp(a)) for a in
                                         (lam_leaf, bi_leaf, bo_leaf))
                self.loss_history_.append(mean_loss)
                self.history_["lr"].append(lr)
                self.history_["lambda"].append(lam_v)
                self.history_["beta_in"].append(bi_v)
                self.history_["beta_out"].append(bo_v)
                self.history_["wall"].append(wall)
                self.n_epochs_ = epoch + 1
                if log_writer:
                    log_writer.writerow([epoch, f"{lr:.6e}", f"{mean_loss:.8e}",
                                         f"{lam_v:.6e}", f"{bi_v:.6e}",
                                         f"{bo_v:.6e}", f"{wall:.3f}"])
                if self._plateaued():
                    logger.info("loss plateaued at epoch %d", epoch)
                    break
        finally:
            self.log_lambda_ = float(lam_leaf)
            self.log_beta_in_ = float(bi_leaf)
            self.log_beta_out_ = float(bo_leaf)
            if log_writer:
                self._log_file.close()
        return self

    def _validate_fit_args(self, X, y, spec, setup):
        if X.ndim != 2 or y.ndim != 4:
            raise ValueError("X must be (N, k) and y (N, m, n_steps+1, d)")
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y disagree on the number of samples")
        if X.shape[1] != spec.true_model.dim_params:
            raise ValueError(f"expected {spec.true_model.dim_params} parameters")
        if y.shape[3] != spec.true_model.dim_state:
            raise ValueError(f"expected state dimension {spec.true_model.dim_state}")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
            raise ValueError("training data must be finite")
        if min(setup["batch"], X.shape[0]) * y.shape[1] < 2:
            raise ValueError("need at least two rows per mini-batch")

    def _initialize(self, X, y, spec, setup, n_steps, dt):
        d = spec.true_model.dim_state
        k = spec.true_model.dim_params
        self.spec_ = spec
        self.known_model_ = setup["known"]
        self.dt_ = dt
        self.n_steps_ = n_steps
        flat_states = y.reshape(-1, d)
        qoi = spec.qoi(y)                       # (N, m, n_steps+1)
        feats = qoi[:, :, 1:].reshape(-1, n_steps)
        ci = spec.correction_index
        # Residual increments of the corrected component against the known
        # drift set the output scale of both network heads; drift corrections
        # are residual-per-dt, diffusion corrections residual-per-sqrt(dt).
        f_known = self._known_drift_component(X, y, spec, setup)
        resid = y[:, :, 1:, ci] - y[:, :, :-1, ci] - f_known * dt
        rms = float(np.sqrt(np.mean(resid ** 2)))
        rms = max(rms, _STD_FLOOR)
        self.stats_ = {
            "state_mean": flat_states.mean(axis=0),
            "state_std": np.maximum(flat_states.std(axis=0), _STD_FLOOR),
            "param_mean": X.mean(axis=0),
            "param_std": np.maximum(X.std(axis=0), _STD_FLOOR),
            "out_mean": feats.mean(axis=0),
            "out_std": np.maximum(feats.std(axis=0), _STD_FLOOR),
            "scale_f": rms / dt,
            "scale_g": rms / np.sqrt(dt),
        }
        self.weights_ = nn.mlp_init(d + k + self.latent_dim, 2,
                                    hidden=tuple(self.hidden_layers),
                                    seed=self.random_state)

    def _known_drift_component(self, X, y, spec, setup):
        """Known drift of the corrected component on all data states."""
        n, m, t1, d = y.shape
        states = y[:, :, :-1, :].reshape(-1, d)
        cols = [states[:, c] for c in range(d)]
        params = np.repeat(np.repeat(X, m, axis=0), t1 - 1, axis=0)
        pcols = [params[:, c] for c in range(X.shape[1])]
        f = setup["known"].drift(cols, pcols, 0.0)
        return np.asarray(f[spec.correction_index]).reshape(n, m, t1 - 1)

    def _beta_out0(self, X, y, spec, setup, n_steps, dt):
        if self.beta_out_init != "median":
            return float(self.beta_out_init)
        # Median heuristic over pooled target and untrained-rollout features:
        # trajectory features span n_steps standardized dimensions, so a unit
        # bandwidth would put typical kernel values at exp(-n_steps) and kill
        # every gradient.
        batch = min(setup["batch"], X.shape[0])
        idx = np.arange(batch)
        target = self._target_features(y, idx, n_steps)
        ds = self.rollout(X[idx], n_replications=y.shape[1], n_steps=n_steps,
                          seed=self.random_state, x0=y[idx, 0, 0, :])
        pred_q = self.spec_.qoi(ds.trajectories)[:, :, 1:].reshape(-1, n_steps)
        pred = (pred_q - self.stats_["out_mean"]) / self.stats_["out_std"]
        pooled = np.concatenate([target, pred], axis=0)
        return float(np.sqrt(0.5 * median_sqdist(pooled)))

    def _target_features(self, y, idx, n_steps):
        qoi = self.spec_.qoi(y[idx])[:, :, 1:].reshape(-1, n_steps)
        return (qoi - self.stats_["out_mean"]) / self.stats_["out_std"]

    def _plateaued(self):
        p = self.plateau_epochs
        hist = self.loss_history_
        if p <= 0 or len(hist) < 2 * p:
            return False
        prev = float(np.nanmean(hist[-2 * p:-p]))
        cur = float(np.nanmean(hist[-p:]))
        if not np.isfinite(prev) or not np.isfinite(cur):
            return False
        return abs(prev - cur) < self.plateau_tol * max(abs(prev), _STD_FLOOR)

    def _open_log(self):
        self._log_file = open(self.log_path, "a", newline="")
        writer = csv.writer(self._log_file)
        if self._log_file.tell() == 0:
            writer.writerow(["epoch", "lr", "loss", "lambda", "beta_in",
                             "beta_out", "wall_seconds"])
        return writer

    # -- one training batch ----------------------------------------------

    def _train_batch(self, X, y, idx, spec, setup, flat, epoch, b, lr,
                     n_steps, dt):
        stats = self.stats_
        m = y.shape[1]
        d = spec.true_model.dim_state
        k = X.shape[1]
        rows = len(idx) * m
        xi_raw = np.repeat(X[idx], m, axis=0)
        xi_std = (xi_raw - stats["param_mean"]) / stats["param_std"]
        x0_rows = np.repeat(y[idx, 0, 0, :], m, axis=0)
        target = self._target_features(y, idx, n_steps)

        rng = np.random.default_rng(np.random.SeedSequence(
            self.random_state, spawn_key=(3, epoch, b)))
        z_draws = rng.standard_normal((n_steps, rows, self.latent_dim))
        db_draws = rng.standard_normal((n_steps, rows, d)) * np.sqrt(dt)

        n_layers = len(self.weights_)
        weight_tensors = [Tensor(a, requires_grad=True) for a in flat[:2 * n_layers]]
        layer_tensors = [(weight_tensors[2 * i], weight_tensors[2 * i + 1])
                         for i in range(n_layers)]
        lam_t, bi_t, bo_t = (Tensor(a, requires_grad=True)
                             for a in flat[2 * n_layers:])
        with np.errstate(over="ignore"):
            hyper = np.exp([float(t.data) for t in (lam_t, bi_t, bo_t)])
        if not np.all(np.isfinite(hyper)) or np.any(hyper <= 0.0):
            logger.warning("degenerate kernel hyperparameters at epoch %d "
                           "batch %d: %s", epoch, b, hyper)
            return None

        with Tape() as tape:
            with np.errstate(over="ignore", invalid="ignore"):
                pred = self._rollout_tape(layer_tensors, xi_raw, xi_std,
                                          x0_rows, z_draws, db_draws,
                                          n_steps, dt)
                loss = cmmd2(xi_std, target, xi_std, pred, ad.exp(lam_t),
                             ad.exp(bi_t), ad.exp(bo_t))
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                logger.warning("non-finite loss at epoch %d batch %d", epoch, b)
                return None
            tape.backward(loss)
        tensors = weight_tensors + [lam_t, bi_t, bo_t]
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data)
                 for t in tensors]
        if not nn.adam_step(self.adam_, flat, grads, lr):
            logger.warning("non-finite gradient at epoch %d batch %d", epoch, b)
            return None
        return loss_val

    def _rollout_tape(self, layers, xi_raw, xi_std, x0_rows, z_draws,
                      db_draws, n_steps, dt):
        stats = self.stats_
        spec = self.spec_
        model = self.known_model_
        d = model.dim_state
        ci = spec.correction_index
        inv_state_std = 1.0 / stats["state_std"]
        inv_out_std = 1.0 / stats["out_std"]
        cols = [x0_rows[:, c:c + 1] for c in range(d)]
        pcols = [xi_raw[:, c:c + 1] for c in range(xi_raw.shape[1])]
        qoi_cols = []
        for step in range(n_steps):
            std_state = [(cols[c] - stats["state_mean"][c]) * inv_state_std[c]
                         for c in range(d)]
            net_in = ad.concat(std_state + [xi_std, z_draws[step]], axis=1)
            heads = nn.mlp_forward(layers, net_in)
            f_pseudo = ad.slice_cols(heads, 0, 1) * stats["scale_f"]
            g_pseudo = ad.slice_cols(heads, 1, 2) * stats["scale_g"]
            db_cols = [db_draws[step][:, c:c + 1] for c in range(d)]
            cols = corrector_step(model, cols, pcols, step * dt, dt, db_cols,
                                  f_pseudo, g_pseudo, ci)
            q = spec.qoi_col(cols)
            qoi_cols.append((q - stats["out_mean"][step]) * inv_out_std[step])
        return ad.concat(qoi_cols, axis=1)

    # -- inference --------------------------------------------------------

    def rollout(self, params, n_replications=1, n_steps=None, seed=0, x0=None,
                z_seed=None):
        """Simulate the corrected system; fresh noise and latents per path.

        Brownian increments come from the same per-(sample, replication)
        streams as the plain simulator, so a zero correction reproduces the
        physics-only ensemble for the same seed exactly.  ``z_seed`` (default
        ``seed``) varies the generative latent draws independently of the
        Brownian noise.
        """
        params = np.atleast_2d(np.asarray(params, dtype=np.float64))
        spec = self.spec_
        model = self.known_model_
        stats = self.stats_
        d = model.dim_state
        n, m = params.shape[0], n_replications
        steps = self.n_steps_ if n_steps is None else int(n_steps)
        dt = self.dt_
        if x0 is None:
            init = spec.initial_state
            x0 = np.stack([np.asarray(init(params[i]), dtype=np.float64)
                           if callable(init) else np.asarray(init, dtype=np.float64)
                           for i in range(n)])
        else:
            x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        x0_rows = np.repeat(x0, m, axis=0)
        xi_raw = np.repeat(params, m, axis=0)
        xi_std = (xi_raw - stats["param_mean"]) / stats["param_std"]
        noise = brownian_block(seed, n, m, steps, d, dt)
        z_seed = seed if z_seed is None else z_seed
        latents = np.empty((n * m, steps, self.latent_dim))
        r = 0
        for i in range(n):
            for j in range(m):
                latents[r] = latent_stream(z_seed, i, j).standard_normal(
                    (steps, self.latent_dim))
                r += 1

        rows = n * m
        ci = spec.correction_index
        inv_state_std = 1.0 / stats["state_std"]
        traj = np.empty((rows, steps + 1, d))
        traj[:, 0, :] = x0_rows
        cols = [x0_rows[:, c].copy() for c in range(d)]
        pcols = [xi_raw[:, c] for c in range(xi_raw.shape[1])]
        for step in range(steps):
            std_state = np.stack(
                [(cols[c] - stats["state_mean"][c]) * inv_state_std[c]
                 for c in range(d)], axis=1)
            net_in = np.concatenate([std_state, xi_std, latents[:, step, :]],
                                    axis=1)
            heads = nn.mlp_forward(self.weights_, net_in)
            f_pseudo = heads[:, 0] * stats["scale_f"]
            g_pseudo = heads[:, 1] * stats["scale_g"]
            db_cols = [noise[:, step, c] for c in range(d)]
            cols = corrector_step(model, cols, pcols, step * dt, dt, db_cols,
                                  f_pseudo, g_pseudo, ci)
            block = np.stack(cols, axis=1)
            if not np.all(np.isfinite(block)):
                bad = int(np.flatnonzero(~np.isfinite(block).all(axis=1))[0])
                raise IntegrationDivergenceError("corrector", bad // m,
                                                 bad % m, step)
            traj[:, step + 1, :] = block
        traj = traj.reshape(n, m, steps + 1, d)
        return TrajectoryDataset(params=params, trajectories=traj, dt=dt,
                                 benchmark=spec.name + ":corrector", seed=seed)

    def qoi_samples(self, xi, t, n_paths, seed=0, x0=None):
        """Quantity-of-interest samples at time ``t`` for one parameter point."""
        xi = np.asarray(xi, dtype=np.float64).reshape(1, -1)
        step = int(round(t / self.dt_))
        if abs(step * self.dt_ - t) > 1e-9 + 1e-6 * self.dt_:
            raise ValueError(f"t={t} is not on the dt={self.dt_} grid")
        if step == 0:
            init = self.spec_.initial_state
            point = (np.asarray(init(xi[0])) if callable(init)
                     else np.asarray(init)) if x0 is None else np.asarray(x0)
            return np.full(n_paths, float(self.spec_.qoi(point.reshape(1, -1))[0]))
        ds = self.rollout(xi, n_replications=n_paths, n_steps=step, seed=seed,
                          x0=None if x0 is None else np.atleast_2d(x0))
        return self.spec_.qoi(ds.trajectories[0, :, step, :])

    def score(self, X, y, seed=0):
        """Negative conditional two-sample loss on held-out trajectories."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        n_steps = y.shape[2] - 1
        stats = self.stats_
        idx = np.arange(X.shape[0])
        target = self._target_features(y, idx, n_steps)
        ds = self.rollout(X, n_replications=y.shape[1], n_steps=n_steps,
                          seed=seed, x0=y[:, 0, 0, :])
        pred_q = self.spec_.qoi(ds.trajectories)[:, :, 1:].reshape(-1, n_steps)
        pred = (pred_q - stats["out_mean"]) / stats["out_std"]
        xi_std = np.repeat((X - stats["param_mean"]) / stats["param_std"],
                           y.shape[1], axis=0)
        return -float(cmmd2(xi_std, target, xi_std, pred,
                            np.exp(self.log_lambda_), np.exp(self.log_beta_in_),
                            np.exp(self.log_beta_out_)))

    # -- hyperparameter views ----------------------------------------------

    @property
    def lambda_(self):
        return float(np.exp(self.log_lambda_))

    @property
    def beta_in_(self):
        return float(np.exp(self.log_beta_in_))

    @property
    def beta_out_(self):
        return float(np.exp(self.log_beta_out_))
