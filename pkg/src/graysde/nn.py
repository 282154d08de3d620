"""Multilayer perceptron, Adam optimizer, and step-decay learning rates.

The forward pass is written against :mod:`graysde.autodiff` ops, so it runs
on plain numpy weights (inference) and on tape :class:`~graysde.autodiff.Tensor`
weights (training) from the same code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from graysde.autodiff import ShapeError, elu, linear

# Hidden-layer widths of the correction network.
HIDDEN_LAYERS = (64, 256, 512, 256, 64)


class DimensionError(ShapeError):
    """An input does not match the layer it is fed into."""


def mlp_init(dim_in, dim_out, hidden=HIDDEN_LAYERS, seed=0, zero_output=True):
    """He-uniform fan-in weights and zero biases for each layer.

    With ``zero_output`` the final layer starts at exactly zero, so the
    network's correction output is identically zero until the first update;
    the surrogate then starts from the known physics instead of from
    random-correction noise.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dims = (dim_in, *hidden, dim_out)
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        if zero_output and i == len(dims) - 2:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return layers


def mlp_forward(layers, x):
    """Affine + ELU chain; identity on the final layer."""
    n_layers = len(layers)
    h = x
    for i, (w, b) in enumerate(layers):
        try:
            h = linear(h, w, b)
        except ShapeError as err:
            raise DimensionError(f"layer {i}: {err}") from err
        if i < n_layers - 1:
            h = elu(h)
    return h


def mlp_num_params(dim_in, dim_out, hidden=HIDDEN_LAYERS):
    dims = (dim_in, *hidden, dim_out)
    return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


@dataclass
class AdamState:
    """First/second moment buffers and step counter for one parameter set."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params],
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state, params, grads, lr):
    """One bias-corrected Adam update, in place on ``params``.

    Returns ``False`` without touching anything if any gradient is
    non-finite, so the caller can skip and log the event.
    """
    if any(not np.all(np.isfinite(g)) for g in grads):
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True


def step_decay(lr0, factor, period, epoch):
    """lr0 * factor ** floor(epoch / period); constant when factor is 1."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if factor == 1.0:
        return lr0
    return lr0 * factor ** (epoch // period)
