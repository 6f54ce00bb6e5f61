"""Training of the two single-robustness auxiliary classifiers.

One teacher counters class imbalance (cross-entropy on prior-shifted logits,
predicting with raw logits at inference), the other counters label noise
(small-loss sample selection after a warmup). Both are deliberately simple:
each is robust to exactly one of the two data pathologies.

Their full-dataset predictions are cached once, bound to the dataset's CRC32,
and consumed by the training arms without re-running the teachers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import PayloadReader, PayloadWriter
from .errors import ChecksumError, ConfigError, TrainingDivergedError
from .models import (
    ClassifierParams,
    ce_loss_grad,
    forward,
    init_params,
    sgd_step,
    zero_grads,
)
from .synthdata import Dataset, dataset_checksum

CACHE_MAGIC = b"DSKC"
CACHE_VERSION = 1

# RNG sub-stream tags; keep the two teacher trainings decoupled.
STREAM_IMBALANCE_AUX = 201
STREAM_NOISE_AUX = 202


@dataclass(eq=False)
class AuxPredictionCache:
    """Full-dataset probability outputs of both teachers, checksum-bound."""

    imbalance_probs: np.ndarray  # C x N
    noise_probs: np.ndarray  # C x N
    dataset_crc: int
    config_echo: str = ""

    def __post_init__(self):
        self.imbalance_probs = np.asarray(self.imbalance_probs, dtype=np.float64)
        self.noise_probs = np.asarray(self.noise_probs, dtype=np.float64)
        if self.imbalance_probs.shape != self.noise_probs.shape:
            raise ValueError("cached prediction matrices disagree in shape")

    def verify_binding(self, ds: Dataset):
        actual = dataset_checksum(ds)
        if actual != self.dataset_crc:
            raise ChecksumError(
                f"prediction cache is bound to dataset CRC {self.dataset_crc:#010x}, "
                f"but the dataset has CRC {actual:#010x}"
            )


def _lr_at(epoch, lr, decay_factor, decay_start, decay_every):
    steps = max(0, (epoch - decay_start) // decay_every) if epoch >= decay_start else 0
    return lr / decay_factor**steps


def _train_classifier(ds, cfg, rng_tag, select_indices=None, logit_shift=None):
    """Shared SGD loop for the auxiliary teachers.

    `select_indices(params, epoch)` returns the (sorted) sample indices to
    train on this epoch; `logit_shift` is added to the output bias during
    gradient computation only, leaving the stored parameters unshifted.
    """
    rng = np.random.default_rng([cfg.seed, rng_tag])
    params = init_params(cfg.aux_arch, ds.feature_dim, ds.num_classes,
                         cfg.hidden_width, rng=rng)
    velocity = zero_grads(params)
    epochs = cfg.aux_epochs
    decay_start, decay_every = cfg.aux_decay_schedule()

    for epoch in range(epochs):
        lr = _lr_at(epoch, cfg.lr, cfg.lr_decay_factor, decay_start, decay_every)
        indices = np.arange(ds.num_samples) if select_indices is None \
            else select_indices(params, epoch)
        if len(indices) == 0:
            raise ConfigError("sample selection produced an empty training set")
        order = indices[rng.permutation(len(indices))]
        for batch_no, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            grad_params = params
            if logit_shift is not None:
                grad_params = params.copy()
                grad_params.biases[-1] = grad_params.biases[-1] + logit_shift
            try:
                _, grads = ce_loss_grad(grad_params, ds.features[batch],
                                        ds.observed_labels[batch])
                params, velocity = sgd_step(params, grads, lr, cfg.momentum,
                                            cfg.weight_decay, velocity)
            except ValueError as exc:
                raise TrainingDivergedError(
                    f"numeric breakdown in auxiliary training at epoch {epoch}, "
                    f"batch {batch_no}: {exc}",
                    epoch=epoch, batch=batch_no,
                ) from exc
    return params


def train_plain_ce(ds: Dataset, cfg, rng_tag: int) -> ClassifierParams:
    """Vanilla cross-entropy teacher; reference point for both auxiliaries."""
    return _train_classifier(ds, cfg, rng_tag)


def train_imbalance_robust(ds: Dataset, cfg) -> ClassifierParams:
    """Logit-adjusted cross-entropy.

    Training logits are shifted by +log(prior) with priors taken from the
    observed (noisy) labels; inference uses the raw logits, which yields the
    prior-corrected, balance-friendly predictions.
    """
    if ds.num_samples == 0:
        raise ValueError("cannot train on an empty dataset")
    observed_counts = np.bincount(ds.observed_labels, minlength=ds.num_classes)
    priors = observed_counts / ds.num_samples
    shift = np.log(np.clip(priors, 1e-8, 1.0))
    return _train_classifier(ds, cfg, STREAM_IMBALANCE_AUX, logit_shift=shift)


def per_sample_ce(params: ClassifierParams, ds: Dataset) -> np.ndarray:
    """Cross-entropy of each sample's observed label under the model."""
    probs = forward(params, ds.features)
    picked = probs[ds.observed_labels, np.arange(ds.num_samples)]
    return -np.log(np.clip(picked, 1e-300, None))


def small_loss_selection(params, ds, keep_fraction) -> np.ndarray:
    """Sorted indices of the lowest-loss `keep_fraction` of the dataset."""
    keep = int(np.floor(keep_fraction * ds.num_samples + 0.5))
    if keep < 1:
        raise ValueError(
            f"keep fraction {keep_fraction} yields an empty selection "
            f"on {ds.num_samples} samples"
        )
    losses = per_sample_ce(params, ds)
    ranked = np.argsort(losses, kind="stable")
    return np.sort(ranked[:keep])


def train_noise_robust(ds: Dataset, cfg) -> ClassifierParams:
    """Small-loss sample selection.

    After a warmup on all samples, each epoch ranks the full training set by
    current per-sample loss and trains only on the lowest (1 - NR_estimate)
    fraction. With keep fraction 1.0 the selection is a no-op and the loop
    reduces to plain cross-entropy training.
    """
    nr_estimate = cfg.resolved_nr_estimate(ds)
    keep_fraction = 1.0 - nr_estimate
    if int(np.floor(keep_fraction * ds.num_samples + 0.5)) < 1:
        raise ConfigError(
            f"noise-ratio estimate {nr_estimate} keeps no samples "
            f"(keep fraction {keep_fraction} of {ds.num_samples})"
        )
    warmup = int(np.floor(cfg.aux_warmup_frac * cfg.aux_epochs + 0.5))

    def select(params, epoch):
        if epoch < warmup or keep_fraction == 1.0:
            return np.arange(ds.num_samples)
        return small_loss_selection(params, ds, keep_fraction)

    return _train_classifier(ds, cfg, STREAM_NOISE_AUX, select_indices=select)


def cache_predictions(
    imbalance_params: ClassifierParams,
    noise_params: ClassifierParams,
    ds: Dataset,
    config_echo: str = "",
) -> AuxPredictionCache:
    """Full-dataset forward passes of both teachers, bound to the dataset CRC."""
    return AuxPredictionCache(
        imbalance_probs=forward(imbalance_params, ds.features),
        noise_probs=forward(noise_params, ds.features),
        dataset_crc=dataset_checksum(ds),
        config_echo=config_echo,
    )


def save_cache(cache: AuxPredictionCache, path):
    w = PayloadWriter(CACHE_MAGIC, CACHE_VERSION)
    w.u32(cache.dataset_crc)
    num_classes, n = cache.imbalance_probs.shape
    w.u64(num_classes)
    w.u64(n)
    w.text(cache.config_echo)
    w.f64_array(cache.imbalance_probs)
    w.f64_array(cache.noise_probs)
    Path(path).write_bytes(w.finish())


def load_cache(path) -> AuxPredictionCache:
    reader = PayloadReader(Path(path).read_bytes(), CACHE_MAGIC, CACHE_VERSION, path)
    crc = reader.u32()
    num_classes = reader.u64()
    n = reader.u64()
    echo = reader.text()
    imbalance = reader.f64_array((num_classes, n))
    noise = reader.f64_array((num_classes, n))
    reader.expect_end()
    return AuxPredictionCache(imbalance, noise, crc, echo)
