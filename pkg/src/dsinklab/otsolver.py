"""Entropically regularized optimal transport via Sinkhorn-Knopp scaling.

Solves  min_P <P, cost> + lam * sum(P log P)  over nonnegative plans whose
row sums and column sums match a prescribed marginal pair. The optimum has
the scaling form diag(u) * exp(-cost/lam) * diag(v), which the solver finds
by alternately rescaling u and v (u first, then v).

Costs in this project are negative log-probabilities clamped away from zero,
so the primal-domain kernel exp(-cost/lam) never underflows at the lam values
in use; a log-domain update path is available for small lam.

A structurally independent reference (`ot_oracle`) solves the same problem by
Newton-type root finding on the dual optimality system and is used by the
test suite to validate the scaling solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import root
from scipy.special import logsumexp

from .errors import NumericalBreakdownError, OracleError

# Relative slack allowed between total row mass and total column mass.
BALANCE_RTOL = 1e-9

# Largest C*N instance the brute-force oracle accepts.
ORACLE_MAX_CELLS = 64


def _readonly_f64(arr, name: str, ndim: int) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    if out.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(eq=False)
class CostMatrix:
    """C-by-N grid of finite real costs (nats)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = _readonly_f64(self.values, "cost", 2)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cost matrix contains nonfinite entries")

    @property
    def shape(self):
        return self.values.shape


@dataclass(eq=False)
class Marginals:
    """Row/column mass targets defining the transport polytope.

    Both vectors must be strictly positive and carry equal total mass
    (within BALANCE_RTOL relative); callers normalize, the solver never
    rescales silently.
    """

    row_target: np.ndarray
    col_target: np.ndarray

    def __post_init__(self):
        self.row_target = _readonly_f64(self.row_target, "row_target", 1)
        self.col_target = _readonly_f64(self.col_target, "col_target", 1)
        for name, vec in (("row_target", self.row_target), ("col_target", self.col_target)):
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"{name} contains nonfinite entries")
            if not np.all(vec > 0.0):
                raise ValueError(f"{name} must be strictly positive")
        row_mass = float(self.row_target.sum())
        col_mass = float(self.col_target.sum())
        if abs(row_mass - col_mass) > BALANCE_RTOL * max(row_mass, col_mass):
            raise ValueError(
                f"unbalanced marginals: row mass {row_mass!r} vs column mass {col_mass!r}"
            )

    @property
    def shape(self):
        return len(self.row_target), len(self.col_target)

    @property
    def total_mass(self) -> float:
        return float(self.row_target.sum())


@dataclass(eq=False)
class ScalingState:
    """Final Sinkhorn scaling vectors; strictly positive and finite."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = _readonly_f64(self.u, "u", 1)
        self.v = _readonly_f64(self.v, "v", 1)
        for name, vec in (("u", self.u), ("v", self.v)):
            if not np.all(np.isfinite(vec)) or not np.all(vec > 0.0):
                raise ValueError(f"scaling vector {name} must be positive and finite")


@dataclass(eq=False)
class TransportPlan:
    """A nonnegative coupling plus convergence diagnostics."""

    values: np.ndarray
    iterations_used: int
    residual: float
    scaling: ScalingState | None = None

    def __post_init__(self):
        self.values = _readonly_f64(self.values, "plan", 2)
        if np.any(self.values < 0.0):
            raise ValueError("transport plan has negative entries")

    @property
    def shape(self):
        return self.values.shape


def _l1_deviation(plan_values: np.ndarray, marg: Marginals) -> float:
    row_dev = np.abs(plan_values.sum(axis=1) - marg.row_target).sum()
    col_dev = np.abs(plan_values.sum(axis=0) - marg.col_target).sum()
    return float(row_dev + col_dev)


def marginal_residual(plan: TransportPlan, marg: Marginals) -> float:
    """L1 row-sum deviation plus L1 column-sum deviation."""
    if plan.shape != marg.shape:
        raise ValueError(f"plan shape {plan.shape} does not match marginals {marg.shape}")
    return _l1_deviation(plan.values, marg)


def _check_solve_args(cost: CostMatrix, marg: Marginals, lam: float, max_iters: int, tol: float):
    if cost.shape != marg.shape:
        raise ValueError(f"cost shape {cost.shape} does not match marginals {marg.shape}")
    if not lam > 0.0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    if tol < 0.0:
        raise ValueError(f"tol must be nonnegative, got {tol}")


def sinkhorn_solve(
    cost: CostMatrix,
    marg: Marginals,
    lam: float,
    max_iters: int = 1000,
    tol: float = 1e-6,
    log_domain: bool = False,
) -> TransportPlan:
    """Alternating-scaling solve of the entropic transport problem.

    Stops early once the L1 marginal residual drops to `tol` (checked every
    iteration), otherwise runs exactly `max_iters` iterations; `tol=0` gives a
    pure fixed-count schedule. `log_domain=True` switches to log-sum-exp
    updates, worth it only when lam is small enough to underflow the kernel.
    """
    _check_solve_args(cost, marg, lam, max_iters, tol)
    if log_domain:
        return _sinkhorn_log(cost, marg, lam, max_iters, tol)

    r, c = marg.row_target, marg.col_target
    num_rows, num_cols = cost.shape
    K = np.exp(-cost.values / lam)
    u = np.full(num_rows, 1.0 / num_rows)
    v = np.full(num_cols, 1.0 / num_cols)

    iterations = 0
    residual = np.inf
    plan = None
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for it in range(1, max_iters + 1):
            u = r / (K @ v)
            v = c / (K.T @ u)
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise NumericalBreakdownError(
                    f"nonfinite scaling entry at iteration {it} (lambda={lam})"
                )
            plan = u[:, None] * K * v[None, :]
            residual = _l1_deviation(plan, marg)
            iterations = it
            if residual <= tol:
                break

    return TransportPlan(plan, iterations, residual, ScalingState(u, v))


def _sinkhorn_log(cost, marg, lam, max_iters, tol) -> TransportPlan:
    r, c = marg.row_target, marg.col_target
    num_rows, num_cols = cost.shape
    log_K = -cost.values / lam
    log_r, log_c = np.log(r), np.log(c)
    log_u = np.full(num_rows, -np.log(num_rows))
    log_v = np.full(num_cols, -np.log(num_cols))

    iterations = 0
    residual = np.inf
    plan = None
    for it in range(1, max_iters + 1):
        log_u = log_r - logsumexp(log_K + log_v[None, :], axis=1)
        log_v = log_c - logsumexp(log_K + log_u[:, None], axis=0)
        if not (np.all(np.isfinite(log_u)) and np.all(np.isfinite(log_v))):
            raise NumericalBreakdownError(
                f"nonfinite log-scaling entry at iteration {it} (lambda={lam})"
            )
        plan = np.exp(log_u[:, None] + log_K + log_v[None, :])
        residual = _l1_deviation(plan, marg)
        iterations = it
        if residual <= tol:
            break

    # The scaling vectors may be unrepresentable in the primal domain (that
    # is the point of the log path); attach them only when they are.
    with np.errstate(over="ignore"):
        u, v = np.exp(log_u), np.exp(log_v)
    scaling = None
    if np.all(np.isfinite(u)) and np.all(u > 0) and np.all(np.isfinite(v)) and np.all(v > 0):
        scaling = ScalingState(u, v)
    return TransportPlan(plan, iterations, residual, scaling)


def ot_oracle(
    cost: CostMatrix,
    marg: Marginals,
    lam: float,
    residual_tol: float = 1e-10,
) -> TransportPlan:
    """Reference entropic-OT solve by root finding on the dual system.

    Stationarity gives plan entries exp((a_i + b_j - cost_ij)/lam - 1) for dual
    potentials (a, b); one potential entry is pinned to remove the shift
    degeneracy, and MINPACK's hybrid Newton method solves the remaining
    marginal equations. Shares no iteration code with `sinkhorn_solve`.

    Only small instances are accepted (C*N <= ORACLE_MAX_CELLS).
    """
    if cost.shape != marg.shape:
        raise ValueError(f"cost shape {cost.shape} does not match marginals {marg.shape}")
    if not lam > 0.0:
        raise ValueError(f"lambda must be positive, got {lam}")
    num_rows, num_cols = cost.shape
    if num_rows * num_cols > ORACLE_MAX_CELLS:
        raise OracleError(
            f"instance too large for oracle: {num_rows}x{num_cols} > {ORACLE_MAX_CELLS} cells"
        )

    M = cost.values
    r, c = marg.row_target, marg.col_target

    def plan_from(potentials):
        a = potentials[:num_rows]
        b = np.concatenate(([0.0], potentials[num_rows:]))
        return np.exp((a[:, None] + b[None, :] - M) / lam - 1.0)

    def equations(potentials):
        plan = plan_from(potentials)
        rows = plan.sum(axis=1) - r
        cols = plan.sum(axis=0) - c
        return np.concatenate((rows, cols[1:]))

    guess = np.zeros(num_rows + num_cols - 1)
    total_nfev = 0
    plan = None
    residual = np.inf
    for _ in range(3):
        sol = root(equations, guess, method="hybr", options={"xtol": 1e-13, "maxfev": 20000})
        total_nfev += int(sol.nfev)
        plan = plan_from(sol.x)
        residual = _l1_deviation(plan, marg)
        if residual <= residual_tol:
            break
        guess = sol.x
    if residual > residual_tol:
        raise OracleError(
            f"oracle failed to reach residual {residual_tol} (got {residual:.3e})"
        )
    return TransportPlan(plan, total_nfev, residual)
