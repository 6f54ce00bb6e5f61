"""Proxy-label allocation fusing two teachers at different granularities.

For a mini-batch, the allocator builds a transport instance whose cost
couples the target model's and the noise-robust teacher's per-sample
predictions, and whose row marginal is the imbalance-robust teacher's
batch-aggregated class distribution. The resulting plan, rescaled by the
batch size, is a column-stochastic proxy-label matrix Q: each column is a
soft target close to the noise-robust prediction, while the row sums track
the imbalance-robust class mass.

Two equivalent evaluations of the distillation loss are provided (a KL form
and a transport form); their agreement is an exact algebraic identity used
as a cross-check throughout the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .otsolver import CostMatrix, Marginals, sinkhorn_solve

# Probabilities are clamped to [PROB_CLAMP, 1] inside every log; softmax
# underflow in the teacher stand-ins can emit exact zeros.
PROB_CLAMP = 1e-8

# Column sums of a probability matrix must match 1 this tightly.
COLUMN_SUM_ATOL = 1e-9


def _check_prob_matrix(mat: np.ndarray, name: str) -> np.ndarray:
    out = np.array(mat, dtype=np.float64, copy=True)
    if out.ndim != 2:
        raise ValueError(f"{name} must be a C x N matrix, got shape {out.shape}")
    if np.any(out < 0.0) or not np.all(np.isfinite(out)):
        raise ValueError(f"{name} has negative or nonfinite entries")
    colsums = out.sum(axis=0)
    if np.any(np.abs(colsums - 1.0) > COLUMN_SUM_ATOL):
        worst = float(np.abs(colsums - 1.0).max())
        raise ValueError(f"{name} columns must sum to 1 (worst deviation {worst:.3e})")
    out.setflags(write=False)
    return out


def _clamped_log(mat: np.ndarray) -> np.ndarray:
    return np.log(np.clip(mat, PROB_CLAMP, 1.0))


@dataclass(eq=False)
class BatchPredictions:
    """Per-batch probability outputs of the three models, all C x N_B."""

    target: np.ndarray
    noise_robust: np.ndarray
    imbalance_robust: np.ndarray

    def __post_init__(self):
        self.target = _check_prob_matrix(self.target, "target")
        self.noise_robust = _check_prob_matrix(self.noise_robust, "noise_robust")
        self.imbalance_robust = _check_prob_matrix(self.imbalance_robust, "imbalance_robust")
        if not (self.target.shape == self.noise_robust.shape == self.imbalance_robust.shape):
            raise ValueError(
                "prediction matrices disagree in shape: "
                f"{self.target.shape}, {self.noise_robust.shape}, {self.imbalance_robust.shape}"
            )

    @property
    def num_classes(self) -> int:
        return self.target.shape[0]

    @property
    def batch_size(self) -> int:
        return self.target.shape[1]


@dataclass(eq=False)
class ProxyLabels:
    """Column-stochastic proxy-label matrix plus solver provenance."""

    q: np.ndarray
    batch_id: str = ""
    iterations_used: int = 0
    residual: float = 0.0

    def __post_init__(self):
        self.q = np.array(self.q, dtype=np.float64, copy=True)
        if self.q.ndim != 2:
            raise ValueError(f"proxy labels must be a C x N matrix, got shape {self.q.shape}")
        self.q.setflags(write=False)


def build_cost(preds: BatchPredictions) -> CostMatrix:
    """Per-entry cost: -log(noise_robust) - log(target), clamped."""
    return CostMatrix(-_clamped_log(preds.noise_robust) - _clamped_log(preds.target))


def build_marginals(preds: BatchPredictions) -> Marginals:
    """Transport constraints: row mass from the imbalance-robust teacher.

    Row target is the imbalance-robust predictions summed over the batch
    (total mass N_B); the column target is all ones, forcing each proxy
    column to be a probability vector. Columns are clamped and renormalized
    first so the constraint set stays balanced and strictly interior even if
    a teacher emitted exact zeros.
    """
    cols = np.clip(preds.imbalance_robust, PROB_CLAMP, 1.0)
    cols = cols / cols.sum(axis=0, keepdims=True)
    row_target = cols.sum(axis=1)
    col_target = np.ones(preds.batch_size)
    return Marginals(row_target, col_target)


def allocate_proxies(
    preds: BatchPredictions,
    iters: int = 50,
    lam: float = 2.0,
    tol: float = 0.0,
    batch_id: str = "",
) -> ProxyLabels:
    """Solve the batch transport instance and rescale to proxy labels.

    Runs the scaling solver on marginals normalized to unit mass, then
    multiplies the plan by N_B so each column sums to one. The default
    tol=0 gives the fixed-iteration-count schedule used during training;
    pass a positive tol to run to convergence instead.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    n_batch = preds.batch_size
    cost = build_cost(preds)
    marg = build_marginals(preds)
    solver_marg = Marginals(marg.row_target / n_batch, marg.col_target / n_batch)
    plan = sinkhorn_solve(cost, solver_marg, lam, max_iters=iters, tol=tol)
    return ProxyLabels(
        q=n_batch * plan.values,
        batch_id=batch_id,
        iterations_used=plan.iterations_used,
        residual=plan.residual,
    )


def dsink_loss_kl(proxies: ProxyLabels, preds: BatchPredictions) -> float:
    """Batch-mean of KL(q_i || noise_robust_i) + KL(q_i || target_i)."""
    q = proxies.q
    if q.shape != preds.target.shape:
        raise ValueError(f"proxy shape {q.shape} does not match predictions {preds.target.shape}")
    entropy_term = xlogy(q, q).sum()
    cross = (q * (_clamped_log(preds.noise_robust) + _clamped_log(preds.target))).sum()
    return float((2.0 * entropy_term - cross) / preds.batch_size)


def dsink_loss_ot(proxies: ProxyLabels, cost: CostMatrix) -> float:
    """Batch-mean transport form: (<Q, cost> + 2 * sum q log q) / N_B.

    Equals `dsink_loss_kl` exactly by algebra whenever the cost was built
    from the same predictions. Requires strictly positive proxies (entropic
    plans are interior).
    """
    q = proxies.q
    if q.shape != cost.shape:
        raise ValueError(f"proxy shape {q.shape} does not match cost {cost.shape}")
    if np.any(q <= 0.0):
        raise ValueError("transport-form loss requires strictly positive proxy entries")
    n_batch = q.shape[1]
    return float(((q * cost.values).sum() + 2.0 * (q * np.log(q)).sum()) / n_batch)


def naive_distill_loss(preds: BatchPredictions) -> float:
    """Equal-weight two-teacher baseline: batch-mean of KL(teacher || target).

    Sums KL(imbalance_robust_i || target_i) + KL(noise_robust_i || target_i)
    over the batch and divides by N_B so comparisons against the
    proxy-label loss are scale-matched.
    """
    log_f = _clamped_log(preds.target)
    total = 0.0
    for teacher in (preds.imbalance_robust, preds.noise_robust):
        total += (xlogy(teacher, teacher) - teacher * log_f).sum()
    return float(total / preds.batch_size)
