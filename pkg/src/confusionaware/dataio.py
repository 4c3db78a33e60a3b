"""Embedding tables, the DICE binary format, CSV export, synthetic data.

DICE layout (all little-endian):
    magic   4 bytes  b"DICE"
    version u32      currently 1
    n       u64
    d       u64
    labels  n * i64  (-1 marks an unlabeled row)
    features n*d * f32, row-major

Features are stored at 32-bit precision; in memory everything is float64.
Writes go through a temp file in the target directory plus os.replace, so
a reader never sees a partial table.
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    BadMagicError,
    DimensionError,
    TruncatedFileError,
    VersionMismatchError,
)
from .numeric import make_rng

DICE_MAGIC = b"DICE"
DICE_VERSION = 1
UNLABELED = -1


@dataclass
class EmbeddingTable:
    """Labeled feature vectors: n rows of d-dimensional embeddings."""

    labels: np.ndarray  # (n,) int64, -1 = unlabeled
    features: np.ndarray  # (n, d) float64

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionError("features must be an n x d matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise DimensionError("labels length must match feature rows")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


def write_table(table: EmbeddingTable, path):
    path = os.fspath(path)
    payload = b"".join(
        [
            DICE_MAGIC,
            struct.pack("<I", DICE_VERSION),
            struct.pack("<QQ", table.n, table.d),
            table.labels.astype("<i8").tobytes(),
            table.features.astype("<f4").tobytes(),
        ]
    )
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_table(path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != DICE_MAGIC:
        raise BadMagicError(f"{path}: not a DICE file")
    if len(blob) < 24:
        raise TruncatedFileError(f"{path}: header truncated")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != DICE_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {DICE_VERSION}")
    n, d = struct.unpack_from("<QQ", blob, 8)
    expected = 24 + n * 8 + n * d * 4
    if len(blob) != expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, got {len(blob)}")
    labels = np.frombuffer(blob, dtype="<i8", count=n, offset=24).copy()
    features = (
        np.frombuffer(blob, dtype="<f4", count=n * d, offset=24 + n * 8)
        .astype(np.float64)
        .reshape(n, d)
    )
    return EmbeddingTable(labels=labels, features=features)


def write_table_csv(table: EmbeddingTable, path):
    """CSV export: id,label,f0..f{d-1} with a required header row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"] + [f"f{j}" for j in range(table.d)])
        for i in range(table.n):
            writer.writerow(
                [i, int(table.labels[i])] + [repr(float(x)) for x in table.features[i]]
            )


def read_table_csv(path) -> EmbeddingTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["id", "label"]:
            raise BadMagicError(f"{path}: missing id,label,f0.. header")
        d = len(header) - 2
        labels, rows = [], []
        for row in reader:
            if len(row) != d + 2:
                raise TruncatedFileError(f"{path}: row with {len(row)} fields, expected {d + 2}")
            labels.append(int(row[1]))
            rows.append([float(x) for x in row[2:]])
        features = np.array(rows, dtype=np.float64).reshape(len(labels), d)
    return EmbeddingTable(labels=np.array(labels, dtype=np.int64), features=features)


@dataclass
class SyntheticSpec:
    """Gaussian mixture spec with controllable inter-class overlap.

    confusable_pairs entries are (i, j, multiplier); both class means are
    pulled toward their midpoint by the multiplier (1.0 = unchanged, near
    0 = nearly coincident), independently in each modality.
    """

    audio_means: np.ndarray  # (C, d_a)
    video_means: np.ndarray  # (C, d_v)
    per_class: int
    std: float = 1.0
    confusable_pairs: list = field(default_factory=list)

    def __post_init__(self):
        self.audio_means = np.asarray(self.audio_means, dtype=np.float64)
        self.video_means = np.asarray(self.video_means, dtype=np.float64)
        if self.audio_means.shape[0] != self.video_means.shape[0]:
            raise DimensionError("audio and video mean tables must agree on class count")
        for i, j, m in self.confusable_pairs:
            if not 0 < m <= 1:
                raise ValueError(f"multiplier for pair ({i},{j}) must be in (0,1], got {m}")

    @property
    def classes(self) -> int:
        return self.audio_means.shape[0]

    @classmethod
    def random(cls, classes, per_class, audio_dim, video_dim, seed,
               spread=10.0, std=1.0, confusable_pairs=()):
        """Means drawn from a wide Gaussian so classes are well separated
        unless a confusable pair pulls them together."""
        rng = make_rng(seed)
        return cls(
            audio_means=rng.normal(0.0, spread, size=(classes, audio_dim)),
            video_means=rng.normal(0.0, spread, size=(classes, video_dim)),
            per_class=per_class,
            std=std,
            confusable_pairs=list(confusable_pairs),
        )


def _apply_confusability(means: np.ndarray, pairs) -> np.ndarray:
    out = means.copy()
    for i, j, mult in pairs:
        mid = (out[i] + out[j]) / 2.0
        out[i] = mid + mult * (out[i] - mid)
        out[j] = mid + mult * (out[j] - mid)
    return out


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator):
    """Paired audio/video tables with shared labels, one Gaussian cluster
    per class per modality."""
    a_means = _apply_confusability(spec.audio_means, spec.confusable_pairs)
    v_means = _apply_confusability(spec.video_means, spec.confusable_pairs)
    labels = np.repeat(np.arange(spec.classes, dtype=np.int64), spec.per_class)
    audio = np.vstack(
        [rng.normal(a_means[c], spec.std, size=(spec.per_class, a_means.shape[1]))
         for c in range(spec.classes)]
    )
    video = np.vstack(
        [rng.normal(v_means[c], spec.std, size=(spec.per_class, v_means.shape[1]))
         for c in range(spec.classes)]
    )
    return (
        EmbeddingTable(labels=labels, features=audio),
        EmbeddingTable(labels=labels.copy(), features=video),
    )
