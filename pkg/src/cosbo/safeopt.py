"""SafeOpt-MC on a finite one-dimensional parameter grid.

The set computations are plain functions over arrays so they can be checked
in isolation; :class:`SafeOptMC` strings them together into the sequential
loop. Function index 0 is always the performance function, indices
``1..q`` are the safety functions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_positive
from .gp import ContextualGP

__all__ = [
    "ParameterGrid",
    "BoundState",
    "StepRecord",
    "SafeOptState",
    "SafeOptMC",
    "EvaluationError",
    "update_bounds",
    "compute_safe_set",
    "compute_maximizers",
    "compute_expanders",
    "select_next",
]

logger = logging.getLogger(__name__)

Evaluator = Callable[[int], "tuple[float, Sequence[float]]"]


class EvaluationError(RuntimeError):
    """An evaluator call failed; ``iteration`` names the step."""

    def __init__(self, iteration, index, cause):
        self.iteration = iteration
        self.index = index
        super().__init__(f"evaluation failed at iteration {iteration} (grid index {index}): {cause!r}")


@dataclass(frozen=True, eq=False)
class ParameterGrid:
    """Uniform grid over one antenna parameter.

    ``unit`` is the number of parameter units (degrees) per GP input unit;
    kernel lengthscales are measured in GP input units.
    """

    name: str
    points: np.ndarray
    unit: float = 1.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("a grid needs at least two points")
        steps = np.diff(pts)
        if np.any(steps <= 0):
            raise ValueError("grid points must be strictly increasing")
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
            raise ValueError("grid spacing must be uniform")
        check_positive(self.unit, "unit")
        object.__setattr__(self, "points", pts)

    @classmethod
    def linspace(cls, name, low, high, n=101, unit=1.0):
        return cls(name, np.linspace(low, high, n), unit)

    def __len__(self):
        return self.points.size

    def __eq__(self, other):
        return (
            isinstance(other, ParameterGrid)
            and self.name == other.name
            and self.unit == other.unit
            and np.array_equal(self.points, other.points)
        )

    @property
    def gp_inputs(self):
        """Grid as GP input rows ``[x / unit, z=1]``."""
        return np.column_stack([self.points / self.unit, np.ones(len(self))])

    def index_of(self, x):
        i = int(np.argmin(np.abs(self.points - x)))
        if not np.isclose(self.points[i], x, rtol=0, atol=1e-9 * max(1.0, abs(x))):
            raise ValueError(f"{x} is not a point of grid {self.name!r}")
        return i


@dataclass(frozen=True)
class BoundState:
    """Contained confidence intervals, shape ``(n_functions, n_points)``."""

    lower: np.ndarray
    upper: np.ndarray
    beta: float

    @property
    def width(self):
        return self.upper - self.lower


def update_bounds(mean, var, beta, previous: BoundState | None = None) -> BoundState:
    """Intersect ``mean ± sqrt(beta * var)`` with the previous intervals.

    Where the intersection is empty both ends are clamped to the midpoint of
    the crossed pair and a warning is logged.
    """
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    std = np.sqrt(np.maximum(np.atleast_2d(np.asarray(var, dtype=float)), 0.0))
    half = np.sqrt(beta) * std
    lower, upper = mean - half, mean + half
    if previous is not None:
        lower = np.maximum(lower, previous.lower)
        upper = np.minimum(upper, previous.upper)
        crossed = lower > upper
        if np.any(crossed):
            logger.warning(
                "confidence intervals became empty at %d (function, point) pairs; "
                "clamping to midpoint (model inconsistency)",
                int(crossed.sum()),
            )
            mid = 0.5 * (lower + upper)
            lower = np.where(crossed, mid, lower)
            upper = np.where(crossed, mid, upper)
    return BoundState(lower, upper, float(beta))


def compute_safe_set(lower_g, thresholds, previous_safe=None, seed=None):
    """Points whose lower bound clears every threshold, plus earlier safe points."""
    lower_g = np.atleast_2d(np.asarray(lower_g, dtype=float))
    h = np.asarray(thresholds, dtype=float).reshape(-1, 1)
    safe = np.all(lower_g >= h, axis=0)
    if previous_safe is not None:
        safe |= np.asarray(previous_safe, dtype=bool)
    if seed is not None:
        safe |= np.asarray(seed, dtype=bool)
    if not safe.any():
        raise ValueError("empty safe set: no safe starting region")
    return safe


def compute_maximizers(lower_f, upper_f, safe):
    """Safe points whose upper bound reaches the best safe lower bound."""
    safe = np.asarray(safe, dtype=bool)
    lower_f = np.asarray(lower_f, dtype=float)
    upper_f = np.asarray(upper_f, dtype=float)
    out = np.zeros_like(safe)
    if safe.any():
        out[safe] = upper_f[safe] >= np.max(lower_f[safe])
    return out


def compute_expanders(safe, upper_g, mean_g, cov_g, noise_g, thresholds, beta):
    """Safe points whose optimistic measurement would certify a new point.

    For every safe candidate ``s`` and safety function ``i`` a hypothetical
    observation ``g_i(s) = upper_g[i, s]`` (noise ``noise_g[i]``) is
    conditioned into the grid posterior ``(mean_g[i], cov_g[i])`` with the
    exact rank-one Gaussian update; ``s`` is an expander if some currently
    unsafe point then has lower bound ``>= thresholds[i]``. A candidate whose
    optimistic value is itself below the threshold never counts.
    """
    safe = np.asarray(safe, dtype=bool)
    upper_g = np.atleast_2d(upper_g)
    mean_g = np.atleast_2d(mean_g)
    cov_g = np.asarray(cov_g, dtype=float)
    if cov_g.ndim == 2:
        cov_g = cov_g[None]
    noise_g = np.broadcast_to(np.asarray(noise_g, dtype=float), (upper_g.shape[0],))
    h = np.broadcast_to(np.asarray(thresholds, dtype=float), (upper_g.shape[0],))
    out = np.zeros_like(safe)
    unsafe = ~safe
    if not safe.any() or not unsafe.any():
        return out
    s_idx, u_idx = np.flatnonzero(safe), np.flatnonzero(unsafe)
    sqrt_beta = np.sqrt(beta)
    for i in range(upper_g.shape[0]):
        cov = cov_g[i]
        # hopeless candidates are dropped before the update
        cand = s_idx[upper_g[i, s_idx] >= h[i]]
        if cand.size == 0:
            continue
        denom = cov[cand, cand] + noise_g[i]
        gain = cov[np.ix_(u_idx, cand)] / denom
        innovation = upper_g[i, cand] - mean_g[i, cand]
        new_mean = mean_g[i, u_idx][:, None] + gain * innovation
        new_var = cov[u_idx, u_idx][:, None] - gain * cov[np.ix_(u_idx, cand)]
        new_lower = new_mean - sqrt_beta * np.sqrt(np.maximum(new_var, 0.0))
        out[cand[np.any(new_lower >= h[i], axis=0)]] = True
    return out


def select_next(candidates, bounds: BoundState):
    """Most uncertain candidate over all functions; lowest index on ties.

    Returns ``None`` when there is no candidate.
    """
    candidates = np.asarray(candidates, dtype=bool)
    if not candidates.any():
        return None
    score = np.max(bounds.width, axis=0)
    score = np.where(candidates, score, -np.inf)
    return int(np.argmax(score))


@dataclass(frozen=True)
class StepRecord:
    iteration: int
    index: int
    x: float
    f_obs: float
    g_obs: tuple
    lower_g: tuple
    safe_set_size: int


@dataclass(frozen=True, eq=False)
class SafeOptState:
    """Everything a run carries between iterations.

    ``X``/``Y`` hold every GP observation (seed, transferred prior data and
    evaluations), ``Y[:, 0]`` the performance values and ``Y[:, 1:]`` the
    safety values. The confidence bounds and sets describe the posterior
    given that data, i.e. they are what the next selection uses.
    """

    grid: ParameterGrid
    X: np.ndarray
    Y: np.ndarray
    gps: tuple
    bounds: BoundState
    safe_set: np.ndarray
    maximizers: np.ndarray
    expanders: np.ndarray
    seed_mask: np.ndarray
    thresholds: np.ndarray
    trace: tuple = ()
    iteration: int = 0
    converged: bool = False
    n_prior: int = 0
    history_safe: tuple = field(default=(), repr=False)

    @property
    def gp_f(self):
        return self.gps[0]

    @property
    def gp_g(self):
        return self.gps[1:]


class SafeOptMC(BaseEstimator):
    """Safe Bayesian optimization with separate GPs per function.

    Parameters
    ----------
    beta : float, default=2.0
        Confidence multiplier; intervals are ``mean ± sqrt(beta) * std``.
    threshold : float or sequence of float, default=0.4
        Safety threshold per safety function.
    signal_variance, lengthscale_x, lengthscale_z : float
        Kernel hyperparameters shared by every GP.
    noise_f, noise_g : float
        Observation noise variances of the performance and safety GPs.
    """

    def __init__(
        self,
        beta=2.0,
        threshold=0.4,
        signal_variance=0.5,
        lengthscale_x=1.0,
        lengthscale_z=1.0,
        noise_f=1e-4,
        noise_g=1e-5,
    ):
        self.beta = beta
        self.threshold = threshold
        self.signal_variance = signal_variance
        self.lengthscale_x = lengthscale_x
        self.lengthscale_z = lengthscale_z
        self.noise_f = noise_f
        self.noise_g = noise_g

    def _gp(self):
        return ContextualGP(self.signal_variance, self.lengthscale_x, self.lengthscale_z)

    def _noise(self, q):
        return np.concatenate([[self.noise_f], np.broadcast_to(self.noise_g, (q,))])

    def initialize(self, grid: ParameterGrid, x0_index, f0, g0, prior_X=None, prior_Y=None) -> SafeOptState:
        """Seed the GPs with the safe point ``x0`` and optional prior rows.

        ``prior_X`` rows are GP inputs ``[x / unit, z]``; ``prior_Y`` rows
        are ``[f, g_1, ..., g_q]``.
        """
        g0 = np.atleast_1d(np.asarray(g0, dtype=float))
        q = g0.size
        seed_row = np.array([[grid.points[x0_index] / grid.unit, 1.0]])
        X = seed_row
        Y = np.concatenate([[float(f0)], g0])[None, :]
        n_prior = 0
        if prior_X is not None and len(prior_X):
            prior_X = np.asarray(prior_X, dtype=float).reshape(-1, 2)
            prior_Y = np.asarray(prior_Y, dtype=float).reshape(-1, q + 1)
            X = np.vstack([X, prior_X])
            Y = np.vstack([Y, prior_Y])
            n_prior = len(prior_X)
        seed = np.zeros(len(grid), dtype=bool)
        seed[x0_index] = True
        thresholds = np.broadcast_to(np.asarray(self.threshold, dtype=float), (q,)).copy()
        return self._refresh(grid, X, Y, seed, thresholds, previous=None, n_prior=n_prior)

    def _refresh(self, grid, X, Y, seed, thresholds, previous, **extra):
        n_funcs = Y.shape[1]
        noise = self._noise(n_funcs - 1)
        queries = grid.gp_inputs
        gps, means, covs = [], [], []
        for i in range(n_funcs):
            gp = self._gp().fit(X, Y[:, i], noise[i])
            mean, cov = gp.predict_cov(queries)
            gps.append(gp)
            means.append(mean)
            covs.append(cov)
        means = np.array(means)
        covs = np.array(covs)
        var = np.diagonal(covs, axis1=1, axis2=2)
        bounds = update_bounds(means, var, self.beta, None if previous is None else previous.bounds)
        safe = compute_safe_set(
            bounds.lower[1:],
            thresholds,
            None if previous is None else previous.safe_set,
            seed,
        )
        maximizers = compute_maximizers(bounds.lower[0], bounds.upper[0], safe)
        expanders = compute_expanders(safe, bounds.upper[1:], means[1:], covs[1:], noise[1:], thresholds, self.beta)
        fields = dict(
            grid=grid,
            X=X,
            Y=Y,
            gps=tuple(gps),
            bounds=bounds,
            safe_set=safe,
            maximizers=maximizers,
            expanders=expanders,
            seed_mask=seed,
            thresholds=thresholds,
        )
        if previous is None:
            return SafeOptState(**fields, history_safe=(safe,), **extra)
        return replace(previous, **fields, history_safe=previous.history_safe + (safe,), **extra)

    def step(self, state: SafeOptState, evaluator: Evaluator) -> SafeOptState:
        """Select, evaluate and condition on one point (context ``z = 1``)."""
        if state.converged:
            return state
        # a point kept only by safe-set monotonicity may have had its lower
        # bound clamped below h; it is not selected again
        certified = np.all(state.bounds.lower[1:] >= np.reshape(state.thresholds, (-1, 1)), axis=0)
        idx = select_next((state.maximizers | state.expanders) & certified, state.bounds)
        if idx is None:
            return replace(state, converged=True)
        t = state.iteration + 1
        try:
            f_obs, g_obs = evaluator(idx)
        except Exception as exc:
            raise EvaluationError(t, idx, exc) from exc
        g_obs = np.atleast_1d(np.asarray(g_obs, dtype=float))
        record = StepRecord(
            iteration=t,
            index=idx,
            x=float(state.grid.points[idx]),
            f_obs=float(f_obs),
            g_obs=tuple(float(v) for v in g_obs),
            lower_g=tuple(float(v) for v in state.bounds.lower[1:, idx]),
            safe_set_size=int(state.safe_set.sum()),
        )
        row = np.array([[state.grid.points[idx] / state.grid.unit, 1.0]])
        X = np.vstack([state.X, row])
        Y = np.vstack([state.Y, np.concatenate([[float(f_obs)], g_obs])])
        new = self._refresh(state.grid, X, Y, state.seed_mask, state.thresholds, previous=state)
        return replace(new, trace=state.trace + (record,), iteration=t)

    def run(self, state: SafeOptState, evaluator: Evaluator, budget: int) -> SafeOptState:
        """Step until ``budget`` evaluations are spent or the run converges."""
        for _ in range(int(budget)):
            state = self.step(state, evaluator)
            if state.converged:
                break
        return state

    @staticmethod
    def best_estimate(state: SafeOptState):
        """``(x, f_obs)`` of the best evaluated point."""
        if not state.trace:
            raise ValueError("no evaluations in trace")
        best = max(state.trace, key=lambda r: r.f_obs)
        return best.x, best.f_obs
