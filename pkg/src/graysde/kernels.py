"""Squared-exponential kernels and the (conditional) kernel two-sample losses.

``cmmd2`` is the training loss: the squared Hilbert-Schmidt distance between
the regularized empirical conditional-embedding operators of the target and
predicted (input, output) sample sets,

    Tr(K_d Kt_d^-1 L_d Kt_d^-1) + Tr(K_s Kt_s^-1 L_s Kt_s^-1)
        - 2 Tr(K_sd Kt_d^-1 L_ds Kt_s^-1),

with Kt = K + lambda*I, input grams K over the conditioning variables and
output grams L over the responses (subscript d: target data, s: simulated).
Everything routes through :mod:`graysde.autodiff` ops, so passing Tensors for
the predicted outputs or the hyperparameters makes the loss differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from graysde import autodiff as ad
from graysde.autodiff import SingularMatrixError, Tensor


class SingularGramError(RuntimeError):
    """Regularized gram matrix could not be factorized."""


@dataclass
class KernelConfig:
    """Squared-exponential kernel hyperparameters (all learnable)."""

    bandwidth_in: float = 1.0
    bandwidth_out: float = 1.0
    regularizer: float = 0.01

    def __post_init__(self):
        if min(self.bandwidth_in, self.bandwidth_out, self.regularizer) <= 0:
            raise ValueError("kernel hyperparameters must be positive")


@dataclass
class GramPair:
    """Input/output gram matrices of one sample set, with the ridge applied."""

    k: np.ndarray
    l: np.ndarray
    k_reg: np.ndarray


def _value(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def se_gram(a, b, beta):
    """Gram matrix k(a_i, b_j) = exp(-|a_i - b_j|^2 / (2 beta^2))."""
    if np.any(_value(beta) <= 0.0):
        raise ValueError("bandwidth must be positive")
    scale = ad.powr(beta, -2.0) * -0.5 if isinstance(beta, Tensor) \
        else -0.5 / float(beta) ** 2
    return ad.exp(ad.pairwise_sqdist(a, b) * scale)


def gram_pair(inputs, outputs, config):
    """Diagnostic view of the gram matrices entering the loss."""
    k = se_gram(inputs, inputs, config.bandwidth_in)
    l = se_gram(outputs, outputs, config.bandwidth_out)
    return GramPair(k=k, l=l, k_reg=k + config.regularizer * np.eye(k.shape[0]))


def mmd2(x, y, beta):
    """Biased V-statistic estimate of the squared maximum mean discrepancy."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    return float(se_gram(x, x, beta).mean()
                 - 2.0 * se_gram(x, y, beta).mean()
                 + se_gram(y, y, beta).mean())


def _solve(mat, rhs, lam):
    try:
        return ad.chol_solve(mat, rhs)
    except SingularMatrixError as err:
        k = _value(mat)
        raise SingularGramError(
            f"gram solve failed at lambda={float(np.ravel(_value(lam))[0]):.3e}, "
            f"cond~{np.linalg.cond(k):.3e}") from err


def cmmd2(inputs_t, outputs_t, inputs_p, outputs_p, lam, beta_in, beta_out):
    """Squared conditional maximum mean discrepancy between two sample sets.

    Row i of ``inputs_*`` conditions row i of ``outputs_*``; the two sets may
    have different sizes.  Differentiable with respect to any Tensor
    argument, in particular ``outputs_p`` and the log-parameterized
    hyperparameters.
    """
    n = _value(inputs_t).shape[0]
    p = _value(inputs_p).shape[0]
    k_d = se_gram(inputs_t, inputs_t, beta_in)
    k_s = se_gram(inputs_p, inputs_p, beta_in)
    k_sd = se_gram(inputs_p, inputs_t, beta_in)
    l_d = se_gram(outputs_t, outputs_t, beta_out)
    l_s = se_gram(outputs_p, outputs_p, beta_out)
    l_ds = se_gram(outputs_t, outputs_p, beta_out)
    kt_d = k_d + lam * np.eye(n)
    kt_s = k_s + lam * np.eye(p)
    term_d = ad.trace_product(_solve(kt_d, k_d, lam), _solve(kt_d, l_d, lam))
    term_s = ad.trace_product(_solve(kt_s, k_s, lam), _solve(kt_s, l_s, lam))
    cross = ad.trace_product(_solve(kt_s, k_sd, lam), _solve(kt_d, l_ds, lam))
    return term_d + term_s - 2.0 * cross


def median_sqdist(rows):
    """Median pairwise squared distance, the bandwidth selection heuristic."""
    d = ad.pairwise_sqdist(np.asarray(rows, dtype=np.float64),
                           np.asarray(rows, dtype=np.float64))
    off = d[~np.eye(d.shape[0], dtype=bool)]
    med = float(np.median(off)) if off.size else 0.0
    return med if med > 0 else 1.0
