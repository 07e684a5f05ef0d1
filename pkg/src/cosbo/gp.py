"""Contextual Gaussian-process regression.

Inputs are rows ``[x_1, ..., x_d, z]``: a location in the parameter domain
followed by a context coordinate ``z`` in ``[-1, 1]``. Measurements made by
the optimizing agent itself carry ``z = 1``; data borrowed from another
agent carries that agent's correlation coefficient, so the product kernel
below shrinks its covariance with first-hand data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_noise, check_points, check_positive, check_targets

__all__ = [
    "KernelParams",
    "ContextPoint",
    "Observation",
    "ContextualGP",
    "NotPositiveDefiniteError",
    "kernel",
    "kernel_matrix",
    "fit",
]

#: diagonal jitter added before factorization
DEFAULT_JITTER = 1e-10


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when ``K + diag(noise)`` cannot be Cholesky-factorized."""

    def __init__(self, X, y, noise):
        self.X, self.y, self.noise = X, y, noise
        super().__init__(
            f"covariance of {len(y)} observations is not positive definite "
            f"(duplicate inputs with zero noise or invalid kernel parameters?); "
            f"inputs={X.tolist()}, noise={noise.tolist()}"
        )


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of the product squared-exponential kernel."""

    signal_variance: float = 0.5
    lengthscale_x: float = 1.0
    lengthscale_z: float = 1.0

    def __post_init__(self):
        for name in ("signal_variance", "lengthscale_x", "lengthscale_z"):
            check_positive(getattr(self, name), name)


class ContextPoint(NamedTuple):
    x: float | Sequence[float]
    z: float = 1.0

    def as_row(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if not -1.0 <= self.z <= 1.0:
            raise ValueError(f"context z must lie in [-1, 1], got {self.z}")
        return np.append(x, float(self.z))


class Observation(NamedTuple):
    point: ContextPoint
    value: float
    noise_variance: float


def kernel_matrix(A, B, params: KernelParams):
    """Covariance between the rows of ``A`` and ``B`` (last column is z)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    ax, az = A[:, :-1] / params.lengthscale_x, A[:, -1] / params.lengthscale_z
    bx, bz = B[:, :-1] / params.lengthscale_x, B[:, -1] / params.lengthscale_z
    # explicit differences: d is tiny here and this keeps K exactly symmetric
    sq = np.sum((ax[:, None, :] - bx[None, :, :]) ** 2, axis=-1)
    sq += (az[:, None] - bz[None, :]) ** 2
    return params.signal_variance * np.exp(-0.5 * sq)


def kernel(a: ContextPoint, b: ContextPoint, params: KernelParams) -> float:
    """Scalar kernel value between two context points.

    Evaluated directly rather than through :func:`kernel_matrix` so that
    ``kernel(a, b) == kernel(b, a)`` holds bit for bit.
    """
    ra, rb = a.as_row(), b.as_row()
    dx = np.sum((ra[:-1] - rb[:-1]) ** 2) / params.lengthscale_x**2
    dz = (ra[-1] - rb[-1]) ** 2 / params.lengthscale_z**2
    return float(params.signal_variance * np.exp(-0.5 * dx) * np.exp(-0.5 * dz))


class ContextualGP(RegressorMixin, BaseEstimator):
    """Zero-mean GP regressor with an RBF(x) * RBF(z) kernel.

    Parameters
    ----------
    signal_variance : float, default=0.5
        Prior variance of the latent function.
    lengthscale_x : float, default=1.0
        Lengthscale over the parameter coordinates.
    lengthscale_z : float, default=1.0
        Lengthscale over the context coordinate.
    jitter : float, default=1e-10
        Added to the diagonal before the Cholesky factorization.

    Attributes
    ----------
    X_ : ndarray of shape (n_samples, n_features)
    y_ : ndarray of shape (n_samples,)
    noise_ : ndarray of shape (n_samples,)
    L_ : ndarray of shape (n_samples, n_samples)
        Lower Cholesky factor of ``K + diag(noise_) + jitter * I``.
    alpha_ : ndarray of shape (n_samples,)
        ``(K + diag(noise_))^{-1} y_``.
    """

    def __init__(self, signal_variance=0.5, lengthscale_x=1.0, lengthscale_z=1.0, jitter=DEFAULT_JITTER):
        self.signal_variance = signal_variance
        self.lengthscale_x = lengthscale_x
        self.lengthscale_z = lengthscale_z
        self.jitter = jitter

    @property
    def kernel_params(self) -> KernelParams:
        return KernelParams(self.signal_variance, self.lengthscale_x, self.lengthscale_z)

    def fit(self, X, y, noise_variance=1e-4):
        """Condition the GP on ``(X, y)``; an empty ``X`` gives the prior."""
        params = self.kernel_params
        X = check_points(X)
        if X.shape[0] == 0:
            X = X.reshape(0, max(X.shape[1], 2))
        y = check_targets(y, X.shape[0])
        noise = check_noise(noise_variance, X.shape[0])
        self.n_features_in_ = X.shape[1]
        self.X_, self.y_, self.noise_ = X, y, noise

        K = kernel_matrix(X, X, params)
        K[np.diag_indices_from(K)] += noise + self.jitter
        try:
            self.L_ = cholesky(K, lower=True) if len(y) else np.zeros((0, 0))
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(X, y, noise) from exc
        self.alpha_ = cho_solve((self.L_, True), y) if len(y) else np.zeros(0)
        return self

    def _cross(self, X):
        check_is_fitted(self, "L_")
        X = check_points(X, self.n_features_in_)
        return X, kernel_matrix(self.X_, X, self.kernel_params)

    def predict(self, X, return_var=False):
        """Posterior mean (and variance) at the rows of ``X``."""
        X, Ks = self._cross(X)
        mean = Ks.T @ self.alpha_
        if not return_var:
            return mean
        v = solve_triangular(self.L_, Ks, lower=True) if len(self.y_) else Ks
        var = self.signal_variance - np.sum(v**2, axis=0)
        return mean, np.maximum(var, 0.0)

    def predict_cov(self, X):
        """Posterior mean and full covariance matrix at the rows of ``X``."""
        X, Ks = self._cross(X)
        mean = Ks.T @ self.alpha_
        cov = kernel_matrix(X, X, self.kernel_params)
        if len(self.y_):
            v = solve_triangular(self.L_, Ks, lower=True)
            cov = cov - v.T @ v
        return mean, cov

    def add_observation(self, x, y, noise_variance):
        """Return a new fitted GP with one more observation (full refit)."""
        check_is_fitted(self, "L_")
        row = check_points(x, self.n_features_in_)
        new = ContextualGP(**self.get_params())
        return new.fit(
            np.vstack([self.X_, row]),
            np.append(self.y_, float(y)),
            np.append(self.noise_, float(noise_variance)),
        )


def fit(observations: Sequence[Observation], params: KernelParams = KernelParams()) -> ContextualGP:
    """Fit a :class:`ContextualGP` from a list of :class:`Observation`."""
    gp = ContextualGP(params.signal_variance, params.lengthscale_x, params.lengthscale_z)
    if not observations:
        return gp.fit(np.zeros((0, 2)), np.zeros(0), np.zeros(0))
    X = np.vstack([obs.point.as_row() for obs in observations])
    y = [obs.value for obs in observations]
    noise = [obs.noise_variance for obs in observations]
    return gp.fit(X, y, noise)
