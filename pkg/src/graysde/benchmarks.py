"""The four benchmark systems: true physics, ablated variants, and defaults.

Each benchmark provides the exact generating SDE, the mis-specified "known"
models (drift term missing, diffusion term missing, or both), the parameter
distributions, initial conditions, quantity of interest, and the training
defaults used in the experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from graysde.autodiff import absval
from graysde.sde import SdeModel

BENCHMARK_NAMES = ("black_scholes", "modified_ou", "sir", "duffing_vdp")
REGIMES = ("drift_missing", "diffusion_missing", "both_missing")

# Fixed constants of the systems.
MOU_NU = 0.2
SIR_ALPHA = 0.01
SIR_BETA = 0.5
SIR_GAMMA = 0.5
SIR_TOTAL = 2000.0
DVDP_ALPHA = 100.0
DVDP_SIGMA = 1.0e4


class ConfigurationError(ValueError):
    """Unknown benchmark or regime identifier."""


@dataclass(frozen=True)
class ParamSpace:
    """Independent uniform distributions, one per parameter."""

    bounds: tuple  # ((low, high), ...)

    @property
    def dim(self):
        return len(self.bounds)

    def sample(self, rng, n):
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return rng.uniform(lo, hi, size=(n, self.dim))


@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    true_model: SdeModel
    known_models: dict
    param_space: ParamSpace
    initial_state: object           # vector or callable(params) -> vector
    qoi_index: int                  # state component carrying the QoI
    qoi_abs: bool                   # report |component| instead of component
    correction_index: int           # component receiving learned corrections
    dt: float
    n_steps: int
    lr_schedules: dict              # regime -> (lr0, decay factor, period)
    n_samples_default: int = 40
    n_replications_default: int = 50
    batch_size_default: int = 10

    def known_model(self, regime):
        if regime not in self.known_models:
            raise ConfigurationError(
                f"unknown regime {regime!r}; expected one of {REGIMES}")
        return self.known_models[regime]

    def lr_schedule(self, regime):
        return self.lr_schedules[regime]

    def qoi(self, traj):
        """Project a (..., dim_state) trajectory array onto the scalar QoI."""
        q = np.asarray(traj)[..., self.qoi_index]
        return np.abs(q) if self.qoi_abs else q

    def qoi_col(self, state_cols):
        """QoI column from state columns (tape or numpy)."""
        col = state_cols[self.qoi_index]
        return absval(col) if self.qoi_abs else col


def _ones_like(col):
    return col * 0.0 + 1.0


def _black_scholes():
    def f_true(x, p, t):
        return (p[0] * x[0],)

    def g_true(x, p, t):
        return (p[1] * x[0],)

    def f_const(x, p, t):
        return (_ones_like(x[0]),)

    def g_unit(x, p, t):
        return (_ones_like(x[0]),)

    def make(label, f, g):
        return SdeModel(1, 2, f, g, label=label)

    return BenchmarkSpec(
        name="black_scholes",
        true_model=make("black_scholes", f_true, g_true),
        known_models={
            "drift_missing": make("black_scholes:drift_missing", f_const, g_true),
            "diffusion_missing": make("black_scholes:diffusion_missing", f_true, g_unit),
            "both_missing": make("black_scholes:both_missing", f_const, g_unit),
        },
        param_space=ParamSpace(((0.0, 0.1), (0.0, 0.4))),
        initial_state=np.array([1.0]),
        qoi_index=0, qoi_abs=False, correction_index=0,
        dt=1e-3, n_steps=100,
        lr_schedules={r: (1e-5, 1.0, 50) for r in REGIMES},
    )


def _modified_ou():
    def f_true(x, p, t):
        return (p[0] - x[0],)

    def g_true(x, p, t):
        return ((MOU_NU * x[0] + 1.0) * p[1],)

    def f_const(x, p, t):
        return (_ones_like(x[0]),)

    def g_unit(x, p, t):
        return (_ones_like(x[0]),)

    def make(label, f, g):
        return SdeModel(1, 2, f, g, label=label)

    return BenchmarkSpec(
        name="modified_ou",
        true_model=make("modified_ou", f_true, g_true),
        known_models={
            "drift_missing": make("modified_ou:drift_missing", f_const, g_true),
            "diffusion_missing": make("modified_ou:diffusion_missing", f_true, g_unit),
            "both_missing": make("modified_ou:both_missing", f_const, g_unit),
        },
        param_space=ParamSpace(((0.9, 2.0), (0.1, 1.0))),
        initial_state=np.array([1.0]),
        qoi_index=0, qoi_abs=False, correction_index=0,
        dt=1e-3, n_steps=100,
        lr_schedules={r: (1e-4, 0.95, 50) for r in REGIMES},
    )


def _sir():
    # State (S, I, R); parameters are the stochastic initial counts (S0, I0).
    def f_true(x, p, t):
        s, i, _ = x
        infection = SIR_BETA * s * i
        return (-infection, infection - SIR_GAMMA * i, SIR_GAMMA * i)

    def f_no_infection(x, p, t):
        # the infection term is unknown to the modeler: dI = -gamma I dt + ...
        s, i, _ = x
        return (-SIR_BETA * s * i, -SIR_GAMMA * i, SIR_GAMMA * i)

    def g_true(x, p, t):
        s, i, _ = x
        return (s * 0.0, SIR_ALPHA * i, s * 0.0)

    def g_unit(x, p, t):
        s, i, _ = x
        return (s * 0.0, _ones_like(i), s * 0.0)

    def initial(params):
        s0, i0 = float(params[0]), float(params[1])
        return np.array([s0, i0, SIR_TOTAL - s0 - i0])

    def make(label, f, g):
        return SdeModel(3, 2, f, g, label=label, state_lower_bound=0.0)

    return BenchmarkSpec(
        name="sir",
        true_model=make("sir", f_true, g_true),
        known_models={
            "drift_missing": make("sir:drift_missing", f_no_infection, g_true),
            "diffusion_missing": make("sir:diffusion_missing", f_true, g_unit),
            "both_missing": make("sir:both_missing", f_no_infection, g_unit),
        },
        param_space=ParamSpace(((1200.0, 1800.0), (20.0, 200.0))),
        initial_state=initial,
        qoi_index=1, qoi_abs=False, correction_index=1,
        dt=1e-3, n_steps=100,
        lr_schedules={r: (1e-6, 0.9, 50) for r in REGIMES},
    )


def _duffing_vdp():
    # State (X, Y) with parametric excitation noise sigma * X * dB in Y.
    def f_true(x, p, t):
        pos, vel = x
        return (vel, p[0] * (1.0 - pos * pos) * vel + p[1] * pos
                - DVDP_ALPHA * pos ** 3)

    def f_linear_damping(x, p, t):
        # the xi1 * X^2 * Y self-limiting term is unknown to the modeler
        pos, vel = x
        return (vel, p[0] * vel + p[1] * pos - DVDP_ALPHA * pos ** 3)

    def g_true(x, p, t):
        pos, vel = x
        return (pos * 0.0, DVDP_SIGMA * pos)

    def g_unit(x, p, t):
        pos, vel = x
        return (pos * 0.0, _ones_like(pos))

    def make(label, f, g):
        return SdeModel(2, 2, f, g, label=label)

    return BenchmarkSpec(
        name="duffing_vdp",
        true_model=make("duffing_vdp", f_true, g_true),
        known_models={
            "drift_missing": make("duffing_vdp:drift_missing", f_linear_damping, g_true),
            "diffusion_missing": make("duffing_vdp:diffusion_missing", f_true, g_unit),
            "both_missing": make("duffing_vdp:both_missing", f_linear_damping, g_unit),
        },
        param_space=ParamSpace(((0.1, 0.5), (5.0, 50.0))),
        # The source problem leaves (X0, Y0) open; a unit displacement at rest
        # is the documented assumption here.
        initial_state=np.array([1.0, 0.0]),
        qoi_index=0, qoi_abs=True, correction_index=1,
        dt=1e-3, n_steps=1000,
        lr_schedules={
            "drift_missing": (1e-6, 0.95, 50),
            "diffusion_missing": (1e-5, 0.95, 50),
            "both_missing": (1e-6, 0.95, 50),
        },
        batch_size_default=2,
    )


_FACTORIES = {
    "black_scholes": _black_scholes,
    "modified_ou": _modified_ou,
    "sir": _sir,
    "duffing_vdp": _duffing_vdp,
}


def make_benchmark(name):
    """Fully populated benchmark by name; raises ConfigurationError otherwise."""
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown benchmark {name!r}; expected one of {BENCHMARK_NAMES}") from None
    return factory()
