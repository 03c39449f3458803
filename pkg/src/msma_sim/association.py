"""Gated optimal assignment between two sets of estimates.

Used both for detection-to-track association inside a tracker and for
track-to-track association between agents.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import chi2

from .errors import SingularCovariance, ValidationError

logger = logging.getLogger(__name__)

SPD_TOL = 1e-12
# Position block used for gating: planar x, y.
PLANAR = (0, 1)


@dataclass(frozen=True)
class AssociationConfig:
    gate_probability: float = 0.99
    gate: Optional[float] = None
    position_dims: Tuple[int, ...] = PLANAR

    def __post_init__(self):
        if not 0.0 < self.gate_probability < 1.0:
            raise ValidationError("association.gate_probability must be in (0, 1)")
        if self.gate is not None and self.gate <= 0:
            raise ValidationError("association.gate must be positive")
        object.__setattr__(self, "position_dims", tuple(int(d) for d in self.position_dims))

    @property
    def gate_value(self):
        """Chi-square gate; 9.21 for the default 99 % / 2 dof."""
        if self.gate is not None:
            return float(self.gate)
        return float(chi2.ppf(self.gate_probability, df=len(self.position_dims)))


@dataclass(frozen=True, eq=False)
class AssignmentProblem:
    cost: np.ndarray
    gate: float = 9.21

    def __post_init__(self):
        cost = np.array(self.cost, dtype=float)
        if cost.ndim != 2:
            if cost.size:
                raise ValidationError("assignment cost must be a 2D matrix")
            cost = cost.reshape(0, 0)
        if np.any(cost < 0):
            raise ValidationError("assignment costs must be >= 0")
        # Anything past the gate is as forbidden as an infinite entry.
        cost = np.where(cost > self.gate, np.inf, cost)
        object.__setattr__(self, "cost", cost)

    @property
    def shape(self):
        return self.cost.shape


@dataclass(frozen=True)
class AssignmentResult:
    pairs: Tuple[Tuple[int, int], ...]
    unassigned_rows: Tuple[int, ...]
    unassigned_cols: Tuple[int, ...]
    total_cost: float = 0.0


def _position_moments(x, dims):
    if isinstance(x, tuple):
        mean, cov = x
    elif hasattr(x, "position_mean"):
        mean, cov = x.position_mean, x.position_covariance
    else:
        mean, cov = x.position, x.covariance
    idx = np.asarray(dims)
    return np.asarray(mean, dtype=float)[idx], np.asarray(cov, dtype=float)[np.ix_(idx, idx)]


def mahalanobis_cost(a, b, dims: Sequence[int] = PLANAR) -> float:
    """Squared Mahalanobis distance between two position estimates.

    Args:
        a, b: GaussianEstimate, Detection, or a (mean, covariance) tuple.
        dims: components of the position block to compare.

    Raises:
        SingularCovariance: if the combined covariance is not positive definite.
    """
    mu_a, p_a = _position_moments(a, dims)
    mu_b, p_b = _position_moments(b, dims)
    s = p_a + p_b
    s = 0.5 * (s + s.T)
    if np.linalg.eigvalsh(s).min() < SPD_TOL:
        raise SingularCovariance("combined position covariance is singular")
    r = mu_a - mu_b
    return float(r @ np.linalg.solve(s, r))


def gated_cost_matrix(rows, cols, cfg: AssociationConfig,
                      compatible: Optional[Callable[[object, object], bool]] = None):
    """Cost matrix with incompatible, singular or out-of-gate pairs set to +inf."""
    gate = cfg.gate_value
    cost = np.full((len(rows), len(cols)), np.inf)
    for i, a in enumerate(rows):
        for j, b in enumerate(cols):
            if compatible is not None and not compatible(a, b):
                continue
            try:
                c = mahalanobis_cost(a, b, cfg.position_dims)
            except SingularCovariance:
                logger.warning(f"singular covariance while gating pair ({i}, {j}); pair skipped")
                continue
            if c <= gate:
                cost[i, j] = c
    return AssignmentProblem(cost, gate)


TIE_TOL = 1e-10


def _optimal_pairs(cost):
    """Most pairs, then least cost, over the finite entries of `cost`."""
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    allowed = np.isfinite(cost)
    if not allowed.any():
        return []
    # Forbidden entries cost more than any feasible matching.
    big = float(cost[allowed].sum()) + 1.0
    padded = np.where(allowed, cost, big)
    rows, cols = linear_sum_assignment(padded)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if allowed[r, c]]


def _lexicographic_pairs(cost, optimal):
    """The lexicographically smallest pair list among the optimal matchings.

    Rows are fixed in order: each takes the lowest column that still admits
    a matching of optimal size and cost, else keeps its current column (or
    stays unmatched).
    """
    n, m = cost.shape
    target_k = len(optimal)
    target_cost = float(sum(cost[r, c] for r, c in optimal))
    tol = TIE_TOL * (1.0 + abs(target_cost))
    current = dict(optimal)
    fixed, used = [], set()
    fixed_cost = 0.0
    for r in range(n):
        chosen = current.get(r)
        limit = chosen if chosen is not None else m
        for c in range(limit):
            if c in used or not np.isfinite(cost[r, c]):
                continue
            rest_rows = list(range(r + 1, n))
            rest_cols = [j for j in range(m) if j not in used and j != c]
            sub = cost[np.ix_(rest_rows, rest_cols)]
            sub_pairs = _optimal_pairs(sub)
            total = fixed_cost + cost[r, c] + sum(sub[i, j] for i, j in sub_pairs)
            if len(fixed) + 1 + len(sub_pairs) == target_k and total <= target_cost + tol:
                chosen = c
                current = {rest_rows[i]: rest_cols[j] for i, j in sub_pairs}
                break
        if chosen is not None:
            fixed.append((r, chosen))
            used.add(chosen)
            fixed_cost += float(cost[r, chosen])
    return tuple(fixed)


def solve_assignment(problem: AssignmentProblem) -> AssignmentResult:
    """Optimal one-to-one matching over the finite entries.

    Among all matchings that use only finite pairs, the solution has the most
    pairs and, among those, the lowest total cost. Solved with scipy's
    shortest-augmenting-path (Jonker-Volgenant family) solver on a copy of
    the matrix whose forbidden entries cost more than any feasible matching.
    Equal-cost optima resolve to the lexicographically smallest sorted pair
    list, so the result does not depend on the solver's internal order.
    """
    cost = problem.cost
    n, m = cost.shape if cost.ndim == 2 else (0, 0)
    if n == 0 or m == 0:
        return AssignmentResult((), tuple(range(n)), tuple(range(m)))
    pairs = _lexicographic_pairs(cost, _optimal_pairs(cost))
    matched_rows = {r for r, _ in pairs}
    matched_cols = {c for _, c in pairs}
    return AssignmentResult(
        pairs=pairs,
        unassigned_rows=tuple(r for r in range(n) if r not in matched_rows),
        unassigned_cols=tuple(c for c in range(m) if c not in matched_cols),
        total_cost=float(sum(cost[r, c] for r, c in pairs)),
    )
