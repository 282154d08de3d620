"""Euler-Maruyama simulation of Ito SDEs with Monte Carlo ensembles.

Models are written column-wise: ``drift(state_cols, param_cols, t)`` takes a
sequence of per-component state columns and returns one column per state
component.  A column is a ``(rows,)`` numpy array during plain simulation and
a ``(rows, 1)`` autodiff Tensor inside a training rollout, so the same model
functions serve both the data generator and the differentiable surrogate.

Randomness: every (sample, replication) pair draws its Brownian path from an
independently spawned stream (``SeedSequence(seed, spawn_key=(1, i, j))``),
so ensemble generation is order-independent and individual paths are
reproducible in isolation.  Spawn-key namespace 0 is reserved for parameter
draws, namespace 2 for the surrogate's latent draws.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class IntegrationDivergenceError(RuntimeError):
    """State became non-finite during integration."""

    def __init__(self, label, sample, replication, step):
        self.sample = sample
        self.replication = replication
        self.step = step
        super().__init__(
            f"{label}: non-finite state at sample={sample} "
            f"replication={replication} step={step}")


@dataclass(frozen=True)
class SdeModel:
    """Drift/diffusion pair for a single-factor Ito SDE.

    ``drift`` and ``diffusion`` are deterministic in their arguments; all
    randomness enters through the Brownian increments and the parameter
    vector.  ``state_lower_bound``, when set, only triggers a logged warning
    if the integrator wanders below it (no clamping).
    """

    dim_state: int
    dim_params: int
    drift: Callable
    diffusion: Callable
    label: str = "sde"
    state_lower_bound: float | None = None


@dataclass(frozen=True)
class SimConfig:
    """Time grid and initial condition for one simulation window."""

    dt: float
    n_steps: int
    initial_state: object  # (dim_state,) vector or callable(params) -> vector
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


@dataclass
class TrajectoryDataset:
    """Monte Carlo ensemble: N parameter draws x m replications x time grid.

    ``trajectories`` has shape (N, m, n_steps + 1, dim_state) with the
    initial condition stored at time index 0.
    """

    params: np.ndarray
    trajectories: np.ndarray
    dt: float
    benchmark: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return self.params.shape[0]

    @property
    def n_replications(self):
        return self.trajectories.shape[1]

    @property
    def n_steps(self):
        return self.trajectories.shape[2] - 1

    @property
    def dim_state(self):
        return self.trajectories.shape[3]


def param_stream(seed):
    """Generator reserved for parameter realizations of a run."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))


def noise_stream(seed, sample, replication):
    """Independent Brownian stream for one (sample, replication) pair."""
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(1, sample, replication)))


def latent_stream(seed, sample, replication):
    """Independent stream for surrogate latent draws, disjoint from noise."""
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(2, sample, replication)))


def brownian_block(seed, n_samples, n_replications, n_steps, dim, dt):
    """Brownian increments for a whole ensemble, shape (N*m, n_steps, dim).

    Increments are N(0, dt) per component.  Row r corresponds to pair
    (r // m, r % m) and depends only on (seed, pair), not on block layout.
    """
    out = np.empty((n_samples * n_replications, n_steps, dim))
    root = np.sqrt(dt)
    r = 0
    for i in range(n_samples):
        for j in range(n_replications):
            rng = noise_stream(seed, i, j)
            out[r] = rng.standard_normal((n_steps, dim)) * root
            r += 1
    return out


def _as_cols(block):
    block = np.asarray(block, dtype=np.float64)
    if block.ndim == 1:
        block = block[None, :]
    return [block[:, c] for c in range(block.shape[1])], block.shape[0]


def step_cols(model, state_cols, param_cols, t, dt, db_cols):
    """One Euler-Maruyama update on column lists (numpy or Tensor)."""
    f = model.drift(state_cols, param_cols, t)
    g = model.diffusion(state_cols, param_cols, t)
    return [state_cols[c] + f[c] * dt + g[c] * db_cols[c]
            for c in range(model.dim_state)]


def euler_maruyama_step(model, state, params, t, dt, dB):
    """state + drift*dt + diffusion (*) dB, elementwise in the noise.

    ``state`` and ``dB`` may be single vectors of length ``dim_state`` or
    row batches of shape (rows, dim_state); ``params`` broadcasts likewise.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    state = np.asarray(state, dtype=np.float64)
    single = state.ndim == 1
    cols, rows = _as_cols(state)
    db_cols, _ = _as_cols(dB)
    pc = np.asarray(params, dtype=np.float64)
    if pc.ndim == 1:
        pc = np.broadcast_to(pc, (rows, pc.shape[0]))
    param_cols = [pc[:, c] for c in range(pc.shape[1])]
    new_cols = step_cols(model, cols, param_cols, t, dt, db_cols)
    out = np.stack(new_cols, axis=1)
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out).all(axis=1))[0])
        raise IntegrationDivergenceError(model.label, bad, 0, 0)
    return out[0] if single else out


def _integrate_block(model, x0_rows, param_rows, noise, dt, label,
                     on_divergence="raise", m=1):
    """Vectorized EM over all rows; returns (rows, n_steps+1, d) plus meta."""
    rows, n_steps, d = noise.shape
    traj = np.empty((rows, n_steps + 1, d))
    traj[:, 0, :] = x0_rows
    cols = [x0_rows[:, c].copy() for c in range(d)]
    param_cols = [param_rows[:, c] for c in range(param_rows.shape[1])]
    alive = np.ones(rows, dtype=bool)
    first_bad = {}
    for step in range(n_steps):
        db_cols = [noise[:, step, c] for c in range(d)]
        with np.errstate(over="ignore", invalid="ignore"):
            cols = step_cols(model, cols, param_cols, step * dt, dt, db_cols)
            block = np.stack(cols, axis=1)
        finite = np.isfinite(block).all(axis=1)
        newly_bad = alive & ~finite
        if newly_bad.any():
            r = int(np.flatnonzero(newly_bad)[0])
            if on_divergence == "raise":
                raise IntegrationDivergenceError(label, r // m, r % m, step)
            for rr in np.flatnonzero(newly_bad):
                first_bad[int(rr)] = step
            alive &= finite
        traj[:, step + 1, :] = block
    meta = {"diverged_rows": len(first_bad)}
    if first_bad:
        meta["first_divergence"] = min(first_bad.values())
        logger.warning("%s: %d of %d paths diverged (first at step %d)",
                       label, len(first_bad), rows, meta["first_divergence"])
    if model.state_lower_bound is not None:
        finite_vals = traj[np.isfinite(traj)]
        if finite_vals.size and finite_vals.min() < model.state_lower_bound:
            meta["negativity_warning"] = True
            logger.warning("%s: state dropped below %g during integration",
                           label, model.state_lower_bound)
    return traj, meta


def _initial_rows(initial_state, params):
    n = params.shape[0]
    if callable(initial_state):
        return np.stack([np.asarray(initial_state(params[i]), dtype=np.float64)
                         for i in range(n)])
    x0 = np.asarray(initial_state, dtype=np.float64)
    return np.tile(x0, (n, 1))


def simulate_ensemble(model, cfg, params_sampler, n_samples, n_replications,
                      on_divergence="raise"):
    """Draw N parameter realizations and m Brownian paths per realization.

    ``params_sampler`` is ``callable(rng, n) -> (n, dim_params)`` or an object
    with such a ``sample`` method.  Fully deterministic given ``cfg.seed``.
    """
    if n_samples < 1 or n_replications < 1:
        raise ValueError("n_samples and n_replications must be >= 1")
    sample = getattr(params_sampler, "sample", params_sampler)
    params = np.asarray(sample(param_stream(cfg.seed), n_samples),
                        dtype=np.float64)
    if params.shape != (n_samples, model.dim_params):
        raise ValueError(f"sampler produced shape {params.shape}, expected "
                         f"({n_samples}, {model.dim_params})")
    return physics_only_rollout(model, cfg, params, n_replications,
                                on_divergence=on_divergence)


def physics_only_rollout(model, cfg, params, n_replications,
                         on_divergence="raise"):
    """Ensemble at caller-fixed parameter realizations (one row per draw)."""
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 2 or params.shape[1] != model.dim_params:
        raise ValueError(f"params must be (n, {model.dim_params})")
    n, m = params.shape[0], n_replications
    x0 = _initial_rows(cfg.initial_state, params)
    x0_rows = np.repeat(x0, m, axis=0)
    param_rows = np.repeat(params, m, axis=0)
    noise = brownian_block(cfg.seed, n, m, cfg.n_steps, model.dim_state, cfg.dt)
    traj, meta = _integrate_block(model, x0_rows, param_rows, noise, cfg.dt,
                                  model.label, on_divergence, m=m)
    traj = traj.reshape(n, m, cfg.n_steps + 1, model.dim_state)
    return TrajectoryDataset(params=params, trajectories=traj, dt=cfg.dt,
                             benchmark=model.label, seed=cfg.seed, meta=meta)
