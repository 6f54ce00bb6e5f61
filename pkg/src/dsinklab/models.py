"""Small differentiable classifiers with hand-derived gradients.

Two architectures: a softmax linear classifier and a one-hidden-layer tanh
network. Both consume row-major feature batches (N_B x d) and emit
column-stochastic probability matrices (C x N_B). Gradients for the
cross-entropy and KL-to-fixed-target losses are computed analytically; the
test suite validates them against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import xlogy

from .binio import PayloadReader, PayloadWriter

ARCH_LINEAR = "linear"
ARCH_MLP1 = "mlp1"

CHECKPOINT_MAGIC = b"DSCP"
CHECKPOINT_VERSION = 1

_ARCH_CODES = {ARCH_LINEAR: 0, ARCH_MLP1: 1}
_CODE_ARCHS = {code: arch for arch, code in _ARCH_CODES.items()}


@dataclass(eq=False)
class ClassifierParams:
    """Weights and biases of one classifier.

    `weights`/`biases` are parallel lists, one entry per layer: [W] for the
    linear model, [W1, W2] for the one-hidden-layer model.
    """

    arch: str
    weights: list
    biases: list
    hidden_width: int | None = None

    def __post_init__(self):
        if self.arch not in _ARCH_CODES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        expected_layers = 1 if self.arch == ARCH_LINEAR else 2
        if len(self.weights) != expected_layers or len(self.biases) != expected_layers:
            raise ValueError(f"{self.arch} expects {expected_layers} layer(s)")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for arr in (*self.weights, *self.biases):
            if not np.all(np.isfinite(arr)):
                raise ValueError("classifier parameters contain nonfinite entries")
        if self.arch == ARCH_MLP1:
            if self.hidden_width is None:
                self.hidden_width = self.weights[0].shape[0]
            if self.weights[0].shape[0] != self.hidden_width:
                raise ValueError("hidden width does not match first-layer shape")
            if self.weights[1].shape[1] != self.hidden_width:
                raise ValueError("layer shapes are inconsistent")

    @property
    def feature_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list:
        """Canonical flat order: W1, b1, (W2, b2)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(
            self.arch,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_width,
        )


@dataclass(eq=False)
class GradientBuffer:
    """Per-layer gradient (or velocity) arrays mirroring ClassifierParams."""

    d_weights: list
    d_biases: list
    count: int = 1

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.d_weights, self.d_biases):
            out.extend((w, b))
        return out


def zero_grads(params: ClassifierParams) -> GradientBuffer:
    return GradientBuffer(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
        count=0,
    )


def init_params(arch, feature_dim, num_classes, hidden_width=None, rng=None) -> ClassifierParams:
    """Seeded uniform init scaled by 1/sqrt(fan_in); biases zero."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if arch == ARCH_LINEAR:
        bound = 1.0 / np.sqrt(feature_dim)
        w = rng.uniform(-bound, bound, size=(num_classes, feature_dim))
        return ClassifierParams(arch, [w], [np.zeros(num_classes)])
    if arch == ARCH_MLP1:
        if hidden_width is None or hidden_width < 1:
            raise ValueError("mlp1 requires a positive hidden_width")
        b1 = 1.0 / np.sqrt(feature_dim)
        b2 = 1.0 / np.sqrt(hidden_width)
        w1 = rng.uniform(-b1, b1, size=(hidden_width, feature_dim))
        w2 = rng.uniform(-b2, b2, size=(num_classes, hidden_width))
        return ClassifierParams(
            arch, [w1, w2], [np.zeros(hidden_width), np.zeros(num_classes)], hidden_width
        )
    raise ValueError(f"unknown architecture {arch!r}")


def _check_features(params: ClassifierParams, features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.feature_dim:
        raise ValueError(
            f"features must be (N, {params.feature_dim}), got shape {X.shape}"
        )
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain nonfinite entries")
    return X


def _forward_parts(params: ClassifierParams, X: np.ndarray):
    """Returns (logits C x N, hidden activations or None)."""
    if params.arch == ARCH_LINEAR:
        logits = params.weights[0] @ X.T + params.biases[0][:, None]
        return logits, None
    hidden = np.tanh(params.weights[0] @ X.T + params.biases[0][:, None])
    logits = params.weights[1] @ hidden + params.biases[1][:, None]
    return logits, hidden


def _softmax_cols(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=0, keepdims=True))
    return z / z.sum(axis=0, keepdims=True)


def _log_softmax_cols(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def forward(params: ClassifierParams, features) -> np.ndarray:
    """Column-stochastic class probabilities, shape (C, N_B)."""
    X = _check_features(params, features)
    logits, _ = _forward_parts(params, X)
    return _softmax_cols(logits)


def _targets_matrix(params, X, labels) -> np.ndarray:
    labels = np.asarray(labels)
    n_batch = X.shape[0]
    if labels.ndim == 1:
        if labels.shape[0] != n_batch:
            raise ValueError(f"expected {n_batch} labels, got {labels.shape[0]}")
        targets = np.zeros((params.num_classes, n_batch))
        targets[labels.astype(np.int64), np.arange(n_batch)] = 1.0
        return targets
    if labels.shape != (params.num_classes, n_batch):
        raise ValueError(
            f"soft targets must be ({params.num_classes}, {n_batch}), got {labels.shape}"
        )
    return np.asarray(labels, dtype=np.float64)


def _backprop(params: ClassifierParams, X, hidden, dlogits) -> GradientBuffer:
    if params.arch == ARCH_LINEAR:
        return GradientBuffer([dlogits @ X], [dlogits.sum(axis=1)])
    dw2 = dlogits @ hidden.T
    db2 = dlogits.sum(axis=1)
    dhidden = params.weights[1].T @ dlogits
    dpre = dhidden * (1.0 - hidden**2)
    dw1 = dpre @ X
    db1 = dpre.sum(axis=1)
    return GradientBuffer([dw1, dw2], [db1, db2])


def ce_loss_grad(params: ClassifierParams, features, labels):
    """Mean cross-entropy over the batch (hard indices or soft targets).

    Returns (loss, GradientBuffer). Logit-layer gradient per sample is
    (probs - target) / N_B.
    """
    X = _check_features(params, features)
    targets = _targets_matrix(params, X, labels)
    logits, hidden = _forward_parts(params, X)
    logp = _log_softmax_cols(logits)
    n_batch = X.shape[0]
    loss = float(-(targets * logp).sum() / n_batch)
    dlogits = (_softmax_cols(logits) - targets) / n_batch
    return loss, _backprop(params, X, hidden, dlogits)


def kl_to_target_grad(params: ClassifierParams, features, targets):
    """Mean KL(target_i || model_i) and its exact gradient.

    Differs from soft-target cross-entropy only by the parameter-independent
    target entropy, so the gradients coincide.
    """
    X = _check_features(params, features)
    T = np.asarray(targets, dtype=np.float64)
    n_batch = X.shape[0]
    if T.shape != (params.num_classes, n_batch):
        raise ValueError(
            f"targets must be ({params.num_classes}, {n_batch}), got {T.shape}"
        )
    colsums = T.sum(axis=0)
    if np.any(np.abs(colsums - 1.0) > 1e-6) or np.any(T < 0.0):
        raise ValueError("targets must be column-stochastic")
    ce, grads = ce_loss_grad(params, X, T)
    loss = ce + float(xlogy(T, T).sum() / n_batch)
    return loss, grads


def sgd_step(params, grads: GradientBuffer, lr, momentum, weight_decay, velocity):
    """Momentum SGD: v <- momentum*v + grad + wd*param; param <- param - lr*v.

    Functional update: returns (new_params, new_velocity).
    """
    if not lr > 0.0:
        raise ValueError(f"lr must be positive, got {lr}")
    new_w, new_b, vel_w, vel_b = [], [], [], []
    # Overflow here surfaces as nonfinite parameters, which the params
    # constructor rejects; suppress the redundant runtime warning.
    with np.errstate(over="ignore", invalid="ignore"):
        for p, g, v in zip(params.weights, grads.d_weights, velocity.d_weights):
            if p.shape != g.shape or p.shape != v.shape:
                raise ValueError("gradient/velocity shape mismatch")
            nv = momentum * v + g + weight_decay * p
            vel_w.append(nv)
            new_w.append(p - lr * nv)
        for p, g, v in zip(params.biases, grads.d_biases, velocity.d_biases):
            if p.shape != g.shape or p.shape != v.shape:
                raise ValueError("gradient/velocity shape mismatch")
            nv = momentum * v + g + weight_decay * p
            vel_b.append(nv)
            new_b.append(p - lr * nv)
    return (
        ClassifierParams(params.arch, new_w, new_b, params.hidden_width),
        GradientBuffer(vel_w, vel_b, velocity.count + 1),
    )


def save_checkpoint(params: ClassifierParams, path):
    w = PayloadWriter(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    w.u8(_ARCH_CODES[params.arch])
    w.u32(params.hidden_width or 0)
    arrays = params.arrays()
    w.u32(len(arrays))
    for arr in arrays:
        w.u32(arr.ndim)
        for dim in arr.shape:
            w.u64(dim)
        w.f64_array(arr)
    Path(path).write_bytes(w.finish())


def load_checkpoint(path) -> ClassifierParams:
    reader = PayloadReader(Path(path).read_bytes(), CHECKPOINT_MAGIC, CHECKPOINT_VERSION, path)
    arch = _CODE_ARCHS[reader.u8()]
    hidden_width = reader.u32() or None
    n_arrays = reader.u32()
    arrays = []
    for _ in range(n_arrays):
        ndim = reader.u32()
        shape = tuple(reader.u64() for _ in range(ndim))
        arrays.append(reader.f64_array(shape))
    reader.expect_end()
    weights = arrays[0::2]
    biases = arrays[1::2]
    return ClassifierParams(arch, weights, biases, hidden_width)
