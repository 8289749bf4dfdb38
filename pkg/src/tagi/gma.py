"""Gaussian moment algebra.

Closed-form moments for products of jointly Gaussian scalars, local
linearization of activation functions, and the moments of activation
derivatives used by the derivative recursions.

Every function accepts plain floats or numpy arrays (broadcasting
elementwise), so the same formulas serve the scalar API and the
vectorized engine.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class Activation(str, enum.Enum):
    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"


@dataclass(frozen=True)
class Gaussian:
    mean: float
    variance: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.variance)):
            raise ValueError(f"non-finite moments: {self.mean}, {self.variance}")
        if self.variance < 0:
            raise ValueError(f"negative variance: {self.variance}")

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


@dataclass(frozen=True)
class GaussianPair:
    a: Gaussian
    b: Gaussian
    cov: float = 0.0

    def __post_init__(self):
        bound = self.a.variance * self.b.variance
        # small slack for covariances computed from rounded variances
        if self.cov * self.cov > bound * (1 + 1e-12) + 1e-300:
            raise ValueError(f"cov {self.cov} violates Cauchy-Schwarz bound {bound}")


@dataclass(frozen=True)
class ActivationMoments:
    a_mean: float
    a_var: float
    jacobian: float
    dphi_mean: float
    dphi_var: float


# ---------------------------------------------------------------------------
# product formulas


def product_mean(p: GaussianPair) -> float:
    """E[X1 X2]."""
    return p.a.mean * p.b.mean + p.cov


def cov_with_product(cov13, cov23, mu1, mu2):
    """cov(X3, X1 X2) given cov(X1, X3), cov(X2, X3) and the means of X1, X2."""
    return cov13 * mu2 + cov23 * mu1


def var_product_moments(mu1, var1, mu2, var2, cov12=0.0):
    """var(X1 X2) from raw moments (array friendly)."""
    return var1 * var2 + cov12 * cov12 + 2.0 * cov12 * mu1 * mu2 + var1 * mu2 * mu2 + var2 * mu1 * mu1


def var_product(p: GaussianPair) -> float:
    """var(X1 X2)."""
    return var_product_moments(p.a.mean, p.a.variance, p.b.mean, p.b.variance, p.cov)


def cov_product_product_terms(c13, c24, c14, c23, mu1, mu2, mu3, mu4):
    """cov(X1 X2, X3 X4) from the four cross covariances and the means."""
    return (
        c13 * c24
        + c14 * c23
        + c13 * mu2 * mu4
        + c14 * mu2 * mu3
        + c23 * mu1 * mu4
        + c24 * mu1 * mu3
    )


def cov_product_product(means, cov, *, atol: float = 1e-12) -> float:
    """cov(X1 X2, X3 X4) for X ~ N(means, cov) with a 4x4 covariance.

    Raises ValueError when ``cov`` is not symmetric positive semidefinite.
    """
    m = np.asarray(means, dtype=float)
    c = np.asarray(cov, dtype=float)
    if m.shape != (4,) or c.shape != (4, 4):
        raise ValueError("expected 4 means and a 4x4 covariance")
    if not np.allclose(c, c.T, atol=atol):
        raise ValueError("covariance is not symmetric")
    scale = max(1.0, float(np.max(np.abs(np.diag(c)))))
    if np.linalg.eigvalsh(c).min() < -atol * scale:
        raise ValueError("covariance is not positive semidefinite")
    return float(
        cov_product_product_terms(c[0, 2], c[1, 3], c[0, 3], c[1, 2], m[0], m[1], m[2], m[3])
    )


# ---------------------------------------------------------------------------
# activations


def linearize(kind: Activation, z_mean, z_var):
    """Locally linearized activation at the mean of Z.

    Returns ``(a_mean, a_var, jacobian, dphi_mean, dphi_var)`` as arrays.
    ``dphi`` is the Gaussian approximation of phi'(Z).
    """
    z_mean = np.asarray(z_mean, dtype=float)
    z_var = np.asarray(z_var, dtype=float)
    kind = Activation(kind)
    if kind is Activation.TANH:
        a_mean = np.tanh(z_mean)
        jac = 1.0 - a_mean * a_mean
        a_var = jac * jac * z_var
        dphi_mean = 1.0 - a_mean * a_mean - a_var
        # var(A^2) with A Gaussian: the product-variance formula with identical factors
        dphi_var = 2.0 * a_var * (a_var + 2.0 * a_mean * a_mean)
    elif kind is Activation.RELU:
        gate = (z_mean > 0).astype(float)
        a_mean = gate * z_mean
        jac = gate
        a_var = gate * z_var
        dphi_mean = gate
        dphi_var = np.zeros_like(z_mean)
    else:
        a_mean = z_mean.copy()
        jac = np.ones_like(z_mean)
        a_var = z_var.copy()
        dphi_mean = np.ones_like(z_mean)
        dphi_var = np.zeros_like(z_mean)
    return a_mean, a_var, jac, dphi_mean, dphi_var


def activation_moments(kind: Activation, z: Gaussian) -> ActivationMoments:
    a_mean, a_var, jac, dm, dv = linearize(kind, z.mean, z.variance)
    return ActivationMoments(float(a_mean), float(a_var), float(jac), float(dm), float(dv))


def activate(kind: Activation, z):
    """Deterministic activation phi(z)."""
    kind = Activation(kind)
    if kind is Activation.TANH:
        return np.tanh(z)
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    return np.asarray(z, dtype=float)


# ---------------------------------------------------------------------------
# covariances involving phi'(Z)


@dataclass(frozen=True)
class DerivCovariances:
    """Covariances of phi'(Z) with neighbouring quantities.

    Attributes follow a unit ``i`` in layer l+1, fed by unit ``j`` in layer l
    through weight W_ij:

    dnext_w      cov(phi'(Z_i^{l+1}), W_ij)
    dnext_dprev  cov(phi'(Z_i^{l+1}), phi'(Z_j^l))
    dnext_zprev  cov(phi'(Z_i^{l+1}), Z_j^l)
    dprev_zprev  cov(phi'(Z_j^l), Z_j^l)
    """

    dnext_w: np.ndarray
    dnext_dprev: np.ndarray
    dnext_zprev: np.ndarray
    dprev_zprev: np.ndarray


def tanh_deriv_covariances(
    next_kind: Activation,
    prev_kind: Activation,
    *,
    a_next_mean,
    j_next,
    w_mean,
    w_var,
    a_prev_mean,
    j_prev,
    z_prev_var,
) -> DerivCovariances:
    """Covariances between derivative factors of adjacent layers.

    Arguments broadcast: ``a_next_mean``/``j_next`` indexed by i (shape (n, 1)
    for matrix use), ``a_prev_mean``/``j_prev``/``z_prev_var`` by j (shape
    (1, m)), ``w_mean``/``w_var`` by (i, j). A non-tanh layer contributes a
    deterministic phi', hence zero covariance (ReLU gate and identity).
    """
    next_kind = Activation(next_kind)
    prev_kind = Activation(prev_kind)
    a_next_mean = np.asarray(a_next_mean, dtype=float)
    j_next = np.asarray(j_next, dtype=float)
    w_mean = np.asarray(w_mean, dtype=float)
    w_var = np.asarray(w_var, dtype=float)
    a_prev_mean = np.asarray(a_prev_mean, dtype=float)
    j_prev = np.asarray(j_prev, dtype=float)
    z_prev_var = np.asarray(z_prev_var, dtype=float)
    shape = np.broadcast_shapes(
        a_next_mean.shape, j_next.shape, w_mean.shape, a_prev_mean.shape, j_prev.shape, z_prev_var.shape
    )
    zero = np.zeros(shape)

    cov_a_prev_z_prev = j_prev * z_prev_var  # cov(A_j, Z_j)
    if prev_kind is Activation.TANH:
        dprev_zprev = -2.0 * a_prev_mean * cov_a_prev_z_prev + zero
    else:
        dprev_zprev = zero.copy()

    if next_kind is not Activation.TANH:
        return DerivCovariances(zero.copy(), zero.copy(), zero.copy(), dprev_zprev)

    # cov(Z_i^{l+1}, W_ij) = var(W_ij) E[A_j]
    dnext_w = -2.0 * a_next_mean * j_next * w_var * a_prev_mean + zero
    # cov(Z_i^{l+1}, Z_j^l) = E[W_ij] cov(A_j, Z_j)
    dnext_zprev = -2.0 * a_next_mean * j_next * w_mean * cov_a_prev_z_prev + zero
    if prev_kind is Activation.TANH:
        # cov(A_i^{l+1}, A_j^l) = J_i E[W_ij] var(A_j)
        c = j_next * w_mean * j_prev * cov_a_prev_z_prev
        dnext_dprev = 2.0 * c * c + 4.0 * c * a_next_mean * a_prev_mean + zero
    else:
        dnext_dprev = zero.copy()
    return DerivCovariances(dnext_w, dnext_dprev, dnext_zprev, dprev_zprev)
