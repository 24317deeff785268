"""Hand-crafted descriptors for content-versus-protection clustering.

Each sample becomes a 132-dimensional vector::

    [0:64)    radial profile of its log-magnitude spectrum, resampled
    [64:128)  radial profile of the signed spectral difference (0 if clean)
    [128]     entropy of the reconstructed perturbation
    [129:132) residual mean, std, mean gradient magnitude

Distances, projections and silhouettes all work on features z-scored across
the set, with zero-variance dimensions dropped.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .detection import DetectionResult
from .errors import MissingStageError, UndefinedScoreError
from .spectral import PairSpectra, Spectrum, radial_profile

log = logging.getLogger(__name__)

PROFILE_BINS = 64
DIMS = 2 * PROFILE_BINS + 4


@dataclass(frozen=True)
class Fingerprint:
    vector: np.ndarray
    base_image_id: str
    protection_label: str
    sample_id: str = ""


@dataclass(frozen=True)
class Embedding2D:
    points: np.ndarray
    method: str = "pca"
    degenerate: bool = False
    explained: tuple = (0.0, 0.0)


def resample_profile(values: np.ndarray, bins: int = PROFILE_BINS) -> np.ndarray:
    """Linear resampling of a radial profile onto ``bins`` points over [0, r_max]."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 1:
        return np.full(bins, values[0])
    src = np.linspace(0.0, 1.0, values.size)
    return np.interp(np.linspace(0.0, 1.0, bins), src, values)


def residual_stats(plane: np.ndarray) -> np.ndarray:
    plane = np.asarray(plane, dtype=np.float64)
    gy, gx = np.gradient(plane)
    return np.array([plane.mean(), plane.std(), np.hypot(gx, gy).mean()])


def build_fingerprint(spectral, detection: DetectionResult | None = None, *,
                      base_image_id: str, protection_label: str, sample_id: str = "") -> Fingerprint:
    """Assemble a descriptor from already-computed stage outputs.

    ``spectral`` is a :class:`PairSpectra` for a clean/perturbed pair or a
    single :class:`Spectrum` for a clean image. Pairs also need the
    detection result (its ``delta_hat`` supplies the residual statistics).
    """
    if spectral is None:
        raise MissingStageError("spectral")
    if isinstance(spectral, PairSpectra):
        if detection is None or detection.delta_hat is None:
            raise MissingStageError("detection")
        own = resample_profile(spectral.profile_perturbed.magnitudes)
        diff = resample_profile(radial_profile(spectral.diff.delta).magnitudes)
        tail = np.concatenate([[detection.entropy], residual_stats(detection.delta_hat.plane)])
    elif isinstance(spectral, Spectrum):
        own = resample_profile(radial_profile(spectral).magnitudes)
        diff = np.zeros(PROFILE_BINS)
        tail = np.zeros(4)
    else:
        raise TypeError(f"unsupported spectral input {type(spectral).__name__}")
    vec = np.concatenate([own, diff, tail])
    if not np.all(np.isfinite(vec)):
        raise ValueError("fingerprint has non-finite entries")
    return Fingerprint(vec, base_image_id, protection_label, sample_id)


def _matrix(fps: Sequence[Fingerprint]) -> np.ndarray:
    return np.vstack([np.asarray(f.vector, dtype=np.float64) for f in fps])


def zscore(x: np.ndarray) -> np.ndarray:
    """Per-column z-scores; zero-variance columns are dropped."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    keep = sd > 0
    dropped = int((~keep).sum())
    if dropped:
        log.debug("dropping %d zero-variance feature dimensions", dropped)
    return (x[:, keep] - mu[keep]) / sd[keep]


def pairwise_distances(z: np.ndarray) -> np.ndarray:
    n = z.shape[0]
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = float(np.sqrt(np.sum((z[i] - z[j]) ** 2)))
    return d


def distance_matrix(fps: Sequence[Fingerprint]) -> np.ndarray:
    if len(fps) < 2:
        raise ValueError("distance_matrix needs at least two fingerprints")
    return pairwise_distances(zscore(_matrix(fps)))


def project_2d(fps: Sequence[Fingerprint]) -> Embedding2D:
    """Top two principal components of the z-scored features.

    Each axis is signed so that its largest-magnitude loading is positive.
    """
    if len(fps) < 3:
        raise ValueError("project_2d needs at least three fingerprints")
    z = zscore(_matrix(fps))
    n = z.shape[0]
    if z.shape[1] == 0:
        return Embedding2D(np.zeros((n, 2)), "pca", True)
    z = z - z.mean(axis=0)
    u, s, vt = np.linalg.svd(z, full_matrices=False)
    tol = s.max() * max(z.shape) * np.finfo(float).eps if s.size else 0.0
    rank = int((s > tol).sum())
    pts = np.zeros((n, 2))
    for k in range(min(2, rank)):
        axis = vt[k]
        if axis[np.argmax(np.abs(axis))] < 0:
            axis = -axis
        pts[:, k] = z @ axis
    total = float((s ** 2).sum())
    explained = tuple(float(s[k] ** 2 / total) if k < rank and total > 0 else 0.0 for k in range(2))
    return Embedding2D(pts, "pca", rank < 2, explained)


def silhouette(dist: np.ndarray, labels: Sequence) -> float:
    """Mean silhouette over all points; singleton clusters score 0."""
    labels = np.asarray(labels)
    groups = list(dict.fromkeys(labels.tolist()))
    if len(groups) < 2:
        raise UndefinedScoreError("silhouette needs at least two groups")
    if all((labels == g).sum() < 2 for g in groups):
        raise UndefinedScoreError("silhouette is undefined when every group is a singleton")
    scores = np.zeros(len(labels))
    for i, lab in enumerate(labels):
        same = labels == lab
        if same.sum() < 2:
            continue
        a = dist[i, same].sum() / (same.sum() - 1)
        b = min(dist[i, labels == g].mean() for g in groups if g != lab)
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def cluster_quality(fps: Sequence[Fingerprint], by: str = "base") -> float:
    """Silhouette of the set grouped by base image (``"base"``) or label (``"label"``)."""
    if by in ("base", "base_image_id"):
        labels = [f.base_image_id for f in fps]
    elif by in ("label", "protection_label"):
        labels = [f.protection_label for f in fps]
    else:
        raise ValueError(f"unknown grouping {by!r}")
    return silhouette(distance_matrix(fps), labels)


def write_fingerprints_csv(fps: Sequence[Fingerprint], path, embedding: Embedding2D | None = None) -> None:
    path = os.fspath(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["sample_id", "base_image_id", "protection_label"]
        if embedding is not None:
            header += ["pc1", "pc2"]
        header += [f"f{i:03d}" for i in range(DIMS)]
        writer.writerow(header)
        for i, f in enumerate(fps):
            row = [f.sample_id, f.base_image_id, f.protection_label]
            if embedding is not None:
                row += [repr(float(v)) for v in embedding.points[i]]
            row += [repr(float(v)) for v in f.vector]
            writer.writerow(row)
