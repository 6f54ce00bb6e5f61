"""Synthetic long-tailed noisy classification datasets.

Features come from isotropic Gaussian clusters whose means sit on random
orthogonal directions scaled by a separation knob; per-class sizes follow an
exponential long-tail profile, and observed labels are corrupted by symmetric
or asymmetric flips. The hidden true labels travel with the dataset so the
evaluation suite can measure noise statistics, but training code only ever
consumes the observed labels.

Datasets persist to a versioned little-endian binary container with a
trailing CRC32 (see `save`); the CRC doubles as the identity other artifacts
(prediction caches) bind to.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import PayloadReader, PayloadWriter
from .errors import MalformedFileError

NOISE_SYMMETRIC = "symmetric"
NOISE_ASYMMETRIC = "asymmetric"
NOISE_NONE = "none"
NOISE_MODES = (NOISE_SYMMETRIC, NOISE_ASYMMETRIC, NOISE_NONE)

SPLIT_TRAIN = "train"
SPLIT_TEST = "test"
_SPLIT_CODES = {SPLIT_TRAIN: 0, SPLIT_TEST: 1}
_CODE_SPLITS = {code: split for split, code in _SPLIT_CODES.items()}

DATASET_MAGIC = b"DSNK"
DATASET_VERSION = 1

# Sub-stream tags so cluster geometry, per-split sampling, and noise draws
# come from distinct deterministic streams of one recipe seed.
_STREAM_MEANS = 101
_STREAM_TRAIN = 102
_STREAM_TEST = 103


@dataclass
class DatasetRecipe:
    """All knobs of the generator; equal recipes yield bit-identical data."""

    num_classes: int
    base_per_class: int = 500
    imbalance_ratio: float = 10.0
    noise_mode: str = NOISE_SYMMETRIC
    noise_ratio: float = 0.4
    feature_dim: int = 16
    class_separation: float = 3.5
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.feature_dim < self.num_classes:
            raise ValueError(
                "feature_dim must be >= num_classes for orthogonal cluster directions "
                f"(got d={self.feature_dim}, C={self.num_classes})"
            )
        if self.base_per_class < 1:
            raise ValueError(f"base_per_class must be >= 1, got {self.base_per_class}")
        if self.imbalance_ratio < 1.0:
            raise ValueError(f"imbalance_ratio must be >= 1, got {self.imbalance_ratio}")
        if self.base_per_class / self.imbalance_ratio < 1.0:
            raise ValueError(
                "infeasible recipe: rarest class would be empty "
                f"(base_per_class={self.base_per_class}, imbalance_ratio={self.imbalance_ratio})"
            )
        if not 0.0 <= self.noise_ratio < 1.0:
            raise ValueError(f"noise_ratio must be in [0, 1), got {self.noise_ratio}")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}, got {self.noise_mode!r}")
        if not self.class_separation > 0.0:
            raise ValueError(f"class_separation must be positive, got {self.class_separation}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def echo_lines(self) -> str:
        return "".join(
            f"{key}={value}\n"
            for key, value in (
                ("num_classes", self.num_classes),
                ("base_per_class", self.base_per_class),
                ("imbalance_ratio", repr(self.imbalance_ratio)),
                ("noise_mode", self.noise_mode),
                ("noise_ratio", repr(self.noise_ratio)),
                ("feature_dim", self.feature_dim),
                ("class_separation", repr(self.class_separation)),
                ("seed", self.seed),
            )
        )

    def echo_compact(self) -> str:
        """Single-line echo for report rows (semicolon-joined key=value)."""
        return ";".join(self.echo_lines().splitlines())

    @classmethod
    def from_echo(cls, echo: str) -> "DatasetRecipe":
        fields = {}
        for line in echo.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            fields[key] = value
        try:
            return cls(
                num_classes=int(fields["num_classes"]),
                base_per_class=int(fields["base_per_class"]),
                imbalance_ratio=float(fields["imbalance_ratio"]),
                noise_mode=fields["noise_mode"],
                noise_ratio=float(fields["noise_ratio"]),
                feature_dim=int(fields["feature_dim"]),
                class_separation=float(fields["class_separation"]),
                seed=int(fields["seed"]),
            )
        except KeyError as exc:
            raise MalformedFileError(f"recipe echo is missing key {exc.args[0]!r}") from exc


@dataclass(eq=False)
class Dataset:
    """Feature matrix plus observed and hidden-true labels for one split."""

    features: np.ndarray
    observed_labels: np.ndarray
    true_labels: np.ndarray
    class_counts: np.ndarray
    split: str
    recipe: DatasetRecipe

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.observed_labels = np.asarray(self.observed_labels, dtype=np.int64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        self.class_counts = np.asarray(self.class_counts, dtype=np.int64)
        if self.split not in _SPLIT_CODES:
            raise ValueError(f"split must be one of {tuple(_SPLIT_CODES)}, got {self.split!r}")
        n = self.features.shape[0]
        if self.observed_labels.shape != (n,) or self.true_labels.shape != (n,):
            raise ValueError("label vectors do not match the feature count")
        recount = np.bincount(self.true_labels, minlength=len(self.class_counts))
        if not np.array_equal(recount, self.class_counts):
            raise ValueError("class_counts are inconsistent with true_labels")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def equals(self, other: "Dataset") -> bool:
        return (
            self.split == other.split
            and self.recipe == other.recipe
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.observed_labels, other.observed_labels)
            and np.array_equal(self.true_labels, other.true_labels)
            and np.array_equal(self.class_counts, other.class_counts)
        )


def sample_longtail_counts(recipe: DatasetRecipe) -> np.ndarray:
    """Exponential long-tail profile: round(base * IR^(-c/(C-1))), floor 1.

    Nonincreasing by construction; the first/last ratio equals the configured
    imbalance ratio up to rounding of the smallest class.
    """
    recipe.validate()
    c = np.arange(recipe.num_classes, dtype=np.float64)
    raw = recipe.base_per_class * recipe.imbalance_ratio ** (-c / (recipe.num_classes - 1))
    counts = np.floor(raw + 0.5).astype(np.int64)  # round half up
    return np.maximum(counts, 1)


def inject_noise(labels, mode: str, ratio: float, num_classes: int, seed: int) -> np.ndarray:
    """Corrupt labels in place of a copy; the input array is untouched.

    symmetric: each label independently flips with probability `ratio` to a
    uniformly random different class. asymmetric: flips go to the fixed
    confusion partner (c+1) mod C.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"noise ratio must be in [0, 1), got {ratio}")
    if mode not in NOISE_MODES:
        raise ValueError(f"unknown noise mode {mode!r}")
    labels = np.asarray(labels, dtype=np.int64)
    out = labels.copy()
    if mode == NOISE_NONE or ratio == 0.0:
        return out
    rng = np.random.default_rng(seed)
    flip = rng.random(len(labels)) < ratio
    if mode == NOISE_SYMMETRIC:
        offsets = rng.integers(1, num_classes, size=int(flip.sum()))
        out[flip] = (labels[flip] + offsets) % num_classes
    else:
        out[flip] = (labels[flip] + 1) % num_classes
    return out


def _class_means(recipe: DatasetRecipe) -> np.ndarray:
    """Cluster means on random orthonormal directions, shared across splits."""
    rng = np.random.default_rng([recipe.seed, _STREAM_MEANS])
    gauss = rng.standard_normal((recipe.feature_dim, recipe.num_classes))
    q, _ = np.linalg.qr(gauss)
    return recipe.class_separation * q[:, : recipe.num_classes].T


def generate(recipe: DatasetRecipe, split: str = SPLIT_TRAIN) -> Dataset:
    """Draw one split deterministically from the recipe seed.

    The train split is long-tailed and noisy per the recipe; the test split
    is class-balanced (base_per_class samples per class) and noise-free.
    Both splits share the same cluster geometry.
    """
    recipe.validate()
    if split not in _SPLIT_CODES:
        raise ValueError(f"split must be one of {tuple(_SPLIT_CODES)}, got {split!r}")
    means = _class_means(recipe)

    if split == SPLIT_TRAIN:
        counts = sample_longtail_counts(recipe)
        rng = np.random.default_rng([recipe.seed, _STREAM_TRAIN])
    else:
        counts = np.full(recipe.num_classes, recipe.base_per_class, dtype=np.int64)
        rng = np.random.default_rng([recipe.seed, _STREAM_TEST])

    true = np.repeat(np.arange(recipe.num_classes, dtype=np.int64), counts)
    features = means[true] + rng.standard_normal((len(true), recipe.feature_dim))
    perm = rng.permutation(len(true))
    features, true = features[perm], true[perm]

    if split == SPLIT_TRAIN:
        noise_seed = int(rng.integers(0, 2**63))
        observed = inject_noise(true, recipe.noise_mode, recipe.noise_ratio,
                                recipe.num_classes, noise_seed)
    else:
        observed = true.copy()

    return Dataset(features, observed, true, counts, split, recipe)


def measure_nr(ds: Dataset) -> float:
    """Fraction of samples whose observed label differs from the true one."""
    return float(np.mean(ds.observed_labels != ds.true_labels))


def measure_ir(ds: Dataset) -> float:
    """Max over min per-class count, computed on true labels."""
    if np.any(ds.class_counts == 0):
        empty = int(np.argmin(ds.class_counts))
        raise ValueError(f"class {empty} is empty; imbalance ratio undefined")
    return float(ds.class_counts.max() / ds.class_counts.min())


def _serialize(ds: Dataset) -> PayloadWriter:
    w = PayloadWriter(DATASET_MAGIC, DATASET_VERSION)
    w.u64(ds.num_samples)
    w.u64(ds.num_classes)
    w.u64(ds.feature_dim)
    w.u8(_SPLIT_CODES[ds.split])
    w.text(ds.recipe.echo_lines())
    w.f64_array(ds.features)
    w.u32_array(ds.observed_labels)
    w.u32_array(ds.true_labels)
    return w


def dataset_checksum(ds: Dataset) -> int:
    """CRC32 identity of the dataset; equals the trailing CRC `save` writes."""
    return _serialize(ds).body_crc()


def save(ds: Dataset, path):
    Path(path).write_bytes(_serialize(ds).finish())


def load(path) -> Dataset:
    reader = PayloadReader(Path(path).read_bytes(), DATASET_MAGIC, DATASET_VERSION, path)
    n = reader.u64()
    num_classes = reader.u64()
    dim = reader.u64()
    split = _CODE_SPLITS.get(reader.u8())
    if split is None:
        raise MalformedFileError(f"{path}: unknown split flag")
    recipe = DatasetRecipe.from_echo(reader.text())
    features = reader.f64_array((n, dim))
    observed = reader.u32_array(n)
    true = reader.u32_array(n)
    reader.expect_end()
    counts = np.bincount(true, minlength=num_classes)
    return Dataset(features, observed, true, counts, split, recipe)
