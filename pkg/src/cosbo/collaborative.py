"""Collaborative initialization (CoSBO) on top of :mod:`cosbo.safeopt`.

The main agent picks the collaborator whose estimated objective on the
adjacent domain X_B correlates best with its own, copies a handful of that
collaborator's points on the main domain X_A into its GPs with context
``z = rho``, and then runs plain SafeOpt-MC.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .safeopt import ParameterGrid, SafeOptMC, SafeOptState

__all__ = [
    "CollaboratorRecord",
    "TransferSet",
    "UndefinedCorrelationError",
    "pearson",
    "select_collaborator",
    "transfer_points",
    "CoSBO",
]

logger = logging.getLogger(__name__)

_UNIT_SNAP = 1e-12


class UndefinedCorrelationError(ValueError):
    """Pearson correlation of a constant vector."""


@dataclass(frozen=True, eq=False)
class CollaboratorRecord:
    """What one collaborator shares.

    ``posterior_B`` is its posterior mean on the shared X_B grid. ``data_A``
    has one row per X_A grid point it reports: ``[grid index, f, g_1, ...]``.
    """

    id: str
    posterior_B: np.ndarray
    data_A: np.ndarray


@dataclass(frozen=True, eq=False)
class TransferSet:
    collaborator_id: str
    z_c: float
    indices: np.ndarray
    values: np.ndarray  # rows [f, g_1, ..., g_q]

    def __len__(self):
        return len(self.indices)


def pearson(a, b):
    """Sample Pearson correlation coefficient of two equal-length vectors."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size or a.size < 2:
        raise ValueError("pearson needs two vectors of equal length >= 2")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(da @ da), np.sqrt(db @ db)
    # relative tolerance: mean subtraction leaves rounding noise on constants
    scale_a = max(np.abs(a).max(), 1.0) * 1e-12 * math.sqrt(a.size)
    scale_b = max(np.abs(b).max(), 1.0) * 1e-12 * math.sqrt(b.size)
    if na <= scale_a or nb <= scale_b:
        raise UndefinedCorrelationError("correlation undefined for a constant vector")
    rho = float((da @ db) / (na * nb))
    # exact affine relations come out as +-1 up to rounding
    if abs(abs(rho) - 1.0) <= _UNIT_SNAP:
        return math.copysign(1.0, rho)
    return float(np.clip(rho, -1.0, 1.0))


def select_collaborator(main_posterior_B, collaborators, mode="best"):
    """Return ``(record, z_c)`` for the most (``"best"``) or least
    (``"worst"``) correlated collaborator, or ``None`` if every correlation
    is undefined.

    Ties go to the lowest id. A collaborator with undefined correlation is
    scored as 0 as long as at least one other correlation is defined.
    """
    if mode not in ("best", "worst"):
        raise ValueError(f"mode must be 'best' or 'worst', got {mode!r}")
    if not collaborators:
        return None
    scored = []
    for rec in collaborators:
        try:
            rho = pearson(main_posterior_B, rec.posterior_B)
        except UndefinedCorrelationError:
            logger.info("collaborator %s has undefined correlation; treated as 0", rec.id)
            rho = None
        scored.append((rec, rho))
    if all(rho is None for _, rho in scored):
        logger.warning("all collaborator correlations undefined; no transfer")
        return None
    sign = -1.0 if mode == "best" else 1.0
    rec, rho = min(scored, key=lambda item: (sign * (item[1] or 0.0), item[0].id))
    return rec, (rho or 0.0)


def transfer_points(record: CollaboratorRecord, k: int, grid_size: int | None = None, z_c: float = 1.0) -> TransferSet:
    """Pick up to ``k`` points of ``record.data_A``.

    The top ``ceil(k/2)`` points by f are taken first, then ``floor(k/2)``
    grid indices spaced evenly over the X_A grid; an even pick already
    chosen (or not reported) is replaced by the next-best remaining f.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    data = np.asarray(record.data_A, dtype=float)
    if data.size == 0:
        raise ValueError(f"collaborator {record.id} has no data on the main domain")
    idx = data[:, 0].astype(int)
    if len(data) <= k:
        if len(data) < k:
            logger.info("collaborator %s offers %d < k=%d points; transferring all", record.id, len(data), k)
        order = np.arange(len(data))
    else:
        # stable sort: ties in f fall back to grid order
        by_f = np.argsort(-data[:, 1], kind="stable")
        n_top = math.ceil(k / 2)
        chosen = list(by_f[:n_top])
        n = grid_size if grid_size is not None else int(idx.max()) + 1
        row_of = {int(g): r for r, g in enumerate(idx)}
        for target in np.linspace(0, n - 1, k - n_top):
            r = row_of.get(int(round(target)))
            if r is None or r in chosen:
                r = next(r for r in by_f if r not in chosen)
            chosen.append(r)
        order = np.array(chosen)
    return TransferSet(record.id, float(z_c), idx[order], data[order, 1:])


class CoSBO(SafeOptMC):
    """SafeOpt-MC with collaborative initialization.

    Parameters
    ----------
    k : int, default=10
        Number of transferred points.
    collaborator_mode : {"best", "worst"}, default="best"
        Pick the most or the least correlated collaborator.
    Other parameters are those of :class:`SafeOptMC`.
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
        k=10,
        collaborator_mode="best",
    ):
        super().__init__(beta, threshold, signal_variance, lengthscale_x, lengthscale_z, noise_f, noise_g)
        self.k = k
        self.collaborator_mode = collaborator_mode

    def initialize_collaborative(
        self,
        grid: ParameterGrid,
        x0_index,
        f0,
        g0,
        collaborators=(),
        main_posterior_B=None,
    ) -> tuple[SafeOptState, TransferSet | None]:
        """Seed at ``x0`` and add the chosen collaborator's transferred data.

        With no usable collaborator the state equals
        ``SafeOptMC.initialize(grid, x0_index, f0, g0)``.
        """
        chosen = None
        if collaborators and main_posterior_B is not None:
            chosen = select_collaborator(main_posterior_B, collaborators, self.collaborator_mode)
        if chosen is None:
            if collaborators:
                logger.warning("no usable collaborator; running plain SafeOpt-MC")
            return self.initialize(grid, x0_index, f0, g0), None
        record, z_c = chosen
        transfer = transfer_points(record, self.k, len(grid), z_c)
        prior_X = np.column_stack([grid.points[transfer.indices] / grid.unit, np.full(len(transfer), z_c)])
        state = self.initialize(grid, x0_index, f0, g0, prior_X, transfer.values)
        return state, transfer
