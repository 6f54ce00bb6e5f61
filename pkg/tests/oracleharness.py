"""Brute-force reference implementations used only by the test suite.

Each oracle is implementationally disjoint from the production path it
validates: gradients come from central differences instead of backprop, AUC
from explicit pairwise comparison instead of rank statistics, and feasible
transport plans from rescaling random matrices rather than from the solver.
"""

from __future__ import annotations

import numpy as np

from dsinklab.errors import OracleError
from dsinklab.models import ClassifierParams, GradientBuffer
from dsinklab.otsolver import Marginals, TransportPlan


def fd_gradient(loss_fn, params: ClassifierParams, step: float) -> GradientBuffer:
    """Central-difference gradient of loss_fn(params), entry by entry."""
    if not step > 0.0:
        raise ValueError(f"step must be positive, got {step}")

    def perturbed(kind, layer, idx, delta):
        probe = params.copy()
        arrays = probe.weights if kind == "w" else probe.biases
        arrays[layer][idx] += delta
        value = loss_fn(probe)
        if not np.isfinite(value):
            raise OracleError(f"loss is nonfinite at probe point {kind}[{layer}]{idx}")
        return value

    d_weights, d_biases = [], []
    for kind, source, sink in (("w", params.weights, d_weights),
                               ("b", params.biases, d_biases)):
        for layer, arr in enumerate(source):
            grad = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                plus = perturbed(kind, layer, idx, step)
                minus = perturbed(kind, layer, idx, -step)
                grad[idx] = (plus - minus) / (2.0 * step)
                it.iternext()
            sink.append(grad)
    return GradientBuffer(d_weights, d_biases)


def feasible_plan_sample(marg: Marginals, seed, tol: float = 1e-9,
                         max_rounds: int = 100_000) -> TransportPlan:
    """A strictly positive plan matching the marginals within tol.

    Starts from a random positive matrix and alternately rescales rows and
    columns until the L1 marginal deviation drops below tol.
    """
    rng = np.random.default_rng(seed)
    r, c = marg.row_target, marg.col_target
    plan = rng.random((len(r), len(c))) + 0.1
    for round_no in range(1, max_rounds + 1):
        plan *= (r / plan.sum(axis=1))[:, None]
        plan *= (c / plan.sum(axis=0))[None, :]
        deviation = (np.abs(plan.sum(axis=1) - r).sum()
                     + np.abs(plan.sum(axis=0) - c).sum())
        if deviation <= tol:
            return TransportPlan(plan, round_no, float(deviation))
    raise OracleError(f"feasible-plan sampler did not converge in {max_rounds} rounds")


def pairwise_auc(scores, labels) -> float:
    """Exact fraction of (positive, negative) pairs ranked correctly; ties 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos = scores[labels]
    neg = scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("pairwise AUC needs at least one positive and one negative")
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))
