"""Aligned multimodal feature datasets, standardization, synthesis, batching."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..exceptions import (
    AlignmentError,
    ConfigError,
    DataError,
    EmptyDatasetError,
    InsufficientDataError,
    ShapeError,
    ValidationError,
)


class Modality(str, enum.Enum):
    IMAGE = "image"
    AUDIO = "audio"
    TEXT = "text"
    FUSED = "fused"


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"
    OOD = "ood"


MODALITIES = (Modality.IMAGE, Modality.AUDIO, Modality.TEXT)

# Feature dimensions of the LUMA bundle.
LUMA_DIMS = {Modality.IMAGE: 50, Modality.AUDIO: 1024, Modality.TEXT: 768}


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Per-sample feature vectors of a single modality."""

    values: np.ndarray
    modality: Modality

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.dtype.kind != "f":
            values = values.astype(np.float64)
        if values.ndim != 2:
            raise ShapeError(f"feature matrix must be 2-D, got shape {values.shape}")
        if values.shape[0] == 0 or values.shape[1] == 0:
            raise EmptyDatasetError("feature matrix has no samples or no columns")
        if not np.all(np.isfinite(values)):
            raise DataError("feature matrix contains NaN or Inf entries")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def check_registry(self, registry=LUMA_DIMS) -> None:
        expected = registry.get(self.modality)
        if expected is not None and expected != self.dim:
            raise ShapeError(f"{self.modality.value} features must have dim {expected}, got {self.dim}")

    def take(self, index) -> "FeatureMatrix":
        return FeatureMatrix(self.values[index], self.modality)


@dataclass(frozen=True, eq=False)
class TripletDataset:
    """Row-aligned (image, audio, text) features with integer class labels."""

    image: FeatureMatrix
    audio: FeatureMatrix
    text: FeatureMatrix
    labels: np.ndarray
    split: Split = Split.TRAIN
    n_classes: Optional[int] = None

    def __post_init__(self):
        counts = {m.modality.value: m.n_samples for m in (self.image, self.audio, self.text)}
        if len(set(counts.values())) != 1:
            raise AlignmentError(f"modalities have different row counts: {counts}")
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.shape[0] != self.image.n_samples:
            raise AlignmentError(
                f"labels must be a vector of length {self.image.n_samples}, got shape {labels.shape}"
            )
        if labels.dtype.kind not in "iu":
            if not np.all(labels == np.round(labels)):
                raise DataError("labels must be integers")
        labels = labels.astype(np.int64)
        n_classes = self.n_classes
        if n_classes is None:
            n_classes = int(labels.max()) + 1
        if n_classes < 1 or labels.min() < 0 or labels.max() >= n_classes:
            raise DataError(f"labels must lie in [0, {n_classes})")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "n_classes", int(n_classes))
        object.__setattr__(self, "split", Split(self.split))

    @classmethod
    def from_arrays(cls, image, audio, text, labels, split=Split.TRAIN, n_classes=None):
        return cls(
            FeatureMatrix(image, Modality.IMAGE),
            FeatureMatrix(audio, Modality.AUDIO),
            FeatureMatrix(text, Modality.TEXT),
            labels,
            split,
            n_classes,
        )

    @property
    def n_samples(self) -> int:
        return self.image.n_samples

    @property
    def dims(self) -> tuple:
        return (self.image.dim, self.audio.dim, self.text.dim)

    @property
    def arrays(self) -> tuple:
        return (self.image.values, self.audio.values, self.text.values)

    def modality(self, m) -> FeatureMatrix:
        return getattr(self, Modality(m).value)

    def take(self, index) -> "TripletDataset":
        return TripletDataset(
            self.image.take(index),
            self.audio.take(index),
            self.text.take(index),
            self.labels[index],
            self.split,
            self.n_classes,
        )


# ---------------------------------------------------------------------------
# Standardization


@dataclass(frozen=True, eq=False)
class StandardizeStats:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = 1e-8


def standardize_fit(m: FeatureMatrix, epsilon: float = 1e-8) -> StandardizeStats:
    """Column means and population standard deviations of ``m``.

    Columns whose std falls below ``epsilon`` are recorded with std 1 so they
    pass through centred but unscaled.
    """
    x = m.values if isinstance(m, FeatureMatrix) else np.asarray(m, dtype=np.float64)
    if x.shape[0] < 2:
        raise InsufficientDataError("standardization needs at least 2 samples")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < epsilon, 1.0, std)
    return StandardizeStats(mean, std, epsilon)


def standardize_apply(m: FeatureMatrix, stats: StandardizeStats) -> FeatureMatrix:
    if m.dim != stats.mean.shape[0]:
        raise ShapeError(f"stats have dim {stats.mean.shape[0]}, matrix has dim {m.dim}")
    return FeatureMatrix((m.values - stats.mean) / stats.std, m.modality)


def standardize_dataset(d: TripletDataset, stats: dict) -> TripletDataset:
    """Apply per-modality stats (typically fit on the training split)."""
    return TripletDataset(
        *(standardize_apply(d.modality(m), stats[m]) for m in MODALITIES),
        d.labels,
        d.split,
        d.n_classes,
    )


def fit_dataset_stats(d: TripletDataset, epsilon: float = 1e-8) -> dict:
    return {m: standardize_fit(d.modality(m), epsilon) for m in MODALITIES}


class Standardizer(TransformerMixin, BaseEstimator):
    """Zero-mean, unit-variance scaling with pass-through of constant columns."""

    def __init__(self, epsilon=1e-8):
        self.epsilon = epsilon

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        stats = standardize_fit(X, self.epsilon)
        self.mean_ = stats.mean
        self.scale_ = stats.std
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self)
        return np.asarray(X) * self.scale_ + self.mean_

    @property
    def stats_(self) -> StandardizeStats:
        check_is_fitted(self)
        return StandardizeStats(self.mean_, self.scale_, self.epsilon)


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Gaussian class blobs in each modality.

    Class centroids are drawn per modality from N(0, class_separation**2) per
    coordinate, so ``class_separation / noise_sigma`` is the per-coordinate
    signal-to-noise ratio.
    """

    n_classes: int = 10
    samples_per_class: int = 100
    dims: tuple = (50, 1024, 768)
    class_separation: float = 10.0
    noise_sigma: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError("dims must be three positive integers")
        if not self.class_separation > 0:
            raise ConfigError("class_separation must be > 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))


_SPLIT_STREAM = {Split.TRAIN: 0, Split.TEST: 1, Split.OOD: 2}


def synth_centroids(spec: SynthSpec) -> tuple:
    rng = np.random.default_rng(spec.seed)
    return tuple(rng.normal(0.0, spec.class_separation, size=(spec.n_classes, d)) for d in spec.dims)


def synth_triplets(spec: SynthSpec, split=Split.TRAIN) -> TripletDataset:
    """Draw a labelled aligned dataset; splits share centroids but not noise."""
    split = Split(split)
    centroids = synth_centroids(spec)
    rng = np.random.default_rng([spec.seed, _SPLIT_STREAM[split]])
    labels = np.repeat(np.arange(spec.n_classes, dtype=np.int64), spec.samples_per_class)
    arrays = []
    for c, d in zip(centroids, spec.dims):
        noise = rng.normal(0.0, 1.0, size=(labels.shape[0], d)) * spec.noise_sigma
        arrays.append(c[labels] + noise)
    return TripletDataset.from_arrays(*arrays, labels, split=split, n_classes=spec.n_classes)


# ---------------------------------------------------------------------------
# Batching


class TripletBatch(NamedTuple):
    index: np.ndarray
    image: np.ndarray
    audio: np.ndarray
    text: np.ndarray
    labels: np.ndarray

    @property
    def arrays(self) -> tuple:
        return (self.image, self.audio, self.text)

    @property
    def size(self) -> int:
        return self.index.shape[0]


def epoch_order(n: int, shuffle: bool, seed: int, epoch: int = 0) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(d: TripletDataset, batch_size: int, shuffle: bool = False, seed: int = 0,
               epoch: int = 0) -> Iterator[TripletBatch]:
    """Yield batches covering every row once; the final batch may be short."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    n = d.n_samples
    if n == 0:
        raise EmptyDatasetError("dataset has no rows")
    order = epoch_order(n, shuffle, seed, epoch)
    image, audio, text = d.arrays
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield TripletBatch(idx, image[idx], audio[idx], text[idx], d.labels[idx])
