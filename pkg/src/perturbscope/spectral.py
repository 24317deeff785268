"""Fourier fingerprints of clean/perturbed pairs.

Log-magnitude spectra are ``log(1 + |FFT2(g)|)`` with an unnormalised
forward transform and DC moved to ``(H // 2, W // 2)``. Radial profiles
average a spectrum over rings of integer (rounded) radius around that
centre.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .imaging import PairedSample, to_grayscale


@dataclass(frozen=True)
class Spectrum:
    mag: np.ndarray

    @property
    def shape(self):
        return self.mag.shape


@dataclass(frozen=True)
class SpectralDiff:
    delta: np.ndarray


@dataclass(frozen=True)
class RadialProfile:
    radii: np.ndarray
    magnitudes: np.ndarray
    ring_sizes: np.ndarray

    @property
    def empty(self) -> np.ndarray:
        return self.ring_sizes == 0

    @property
    def r_max(self) -> int:
        return int(self.radii[-1])


@dataclass(frozen=True)
class PairSpectra:
    """Everything the pair pipeline exports."""

    clean: Spectrum
    perturbed: Spectrum
    diff: SpectralDiff
    radii: np.ndarray
    profile_clean: RadialProfile
    profile_perturbed: RadialProfile


def fft_shift(a: np.ndarray) -> np.ndarray:
    """Quadrant swap that moves index (0, 0) to (H // 2, W // 2)."""
    return np.fft.fftshift(a)


def fft_log_magnitude(gray: np.ndarray) -> Spectrum:
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"expected a single-channel HxW image, got shape {g.shape}")
    if g.shape[0] < 2 or g.shape[1] < 2:
        raise ValueError(f"spectrum needs at least 2x2 input, got {g.shape}")
    f = fft_shift(np.fft.fft2(g))
    return Spectrum(np.log1p(np.abs(f)))


def spectral_difference(clean: Spectrum, perturbed: Spectrum) -> SpectralDiff:
    """Signed ``perturbed - clean``: positive where the perturbation adds energy."""
    if clean.shape != perturbed.shape:
        raise ValueError(f"spectrum shapes differ: {clean.shape} vs {perturbed.shape}")
    return SpectralDiff(perturbed.mag - clean.mag)


def radius_map(h: int, w: int) -> np.ndarray:
    cy, cx = h // 2, w // 2
    yy, xx = np.mgrid[0:h, 0:w]
    return np.rint(np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)).astype(np.intp)


def radial_profile(spec) -> RadialProfile:
    """Mean of a plane over rounded-radius rings; empty rings report 0."""
    plane = spec.mag if isinstance(spec, Spectrum) else np.asarray(spec, dtype=np.float64)
    h, w = plane.shape
    r = radius_map(h, w)
    r_max = int(r.max())
    sizes = np.bincount(r.ravel(), minlength=r_max + 1)
    sums = np.bincount(r.ravel(), weights=plane.ravel(), minlength=r_max + 1)
    means = np.divide(sums, sizes, out=np.zeros(r_max + 1), where=sizes > 0)
    return RadialProfile(np.arange(r_max + 1), means, sizes)


def fingerprint_pair(pair: PairedSample) -> PairSpectra:
    clean = fft_log_magnitude(to_grayscale(pair.clean))
    perturbed = fft_log_magnitude(to_grayscale(pair.perturbed))
    diff = spectral_difference(clean, perturbed)
    prof_c = radial_profile(clean)
    prof_p = radial_profile(perturbed)
    if not np.array_equal(prof_c.radii, prof_p.radii):
        raise AssertionError("clean and perturbed radius vectors differ")
    return PairSpectra(clean, perturbed, diff, prof_c.radii, prof_c, prof_p)


def write_profile_csv(profile: RadialProfile, path) -> None:
    path = os.fspath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["radius", "magnitude", "ring_size", "empty_flag"])
        for k, m, n in zip(profile.radii, profile.magnitudes, profile.ring_sizes):
            writer.writerow([int(k), repr(float(m)), int(n), int(n == 0)])


def read_profile_csv(path) -> RadialProfile:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return RadialProfile(
        np.array([int(r["radius"]) for r in rows]),
        np.array([float(r["magnitude"]) for r in rows]),
        np.array([int(r["ring_size"]) for r in rows]),
    )
