"""Sliding-window occlusion sensitivity maps.

For every window position on the stride lattice the clean image is zeroed
inside the window and compared to the perturbed image; the mean absolute
difference over the whole image (all pixels, all channels) is written back
into the window region of the heatmap.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .imaging import PairedSample


class OverlapMode(str, enum.Enum):
    OVERWRITE = "overwrite"
    AVERAGE = "average"


@dataclass(frozen=True)
class OcclusionConfig:
    window: int = 32
    stride: int = 16
    baseline_value: float = 0.0
    overlap: OverlapMode = OverlapMode.OVERWRITE

    def __post_init__(self):
        object.__setattr__(self, "overlap", OverlapMode(self.overlap))
        if self.window < 1 or self.stride < 1:
            raise ValueError("window and stride must be positive")
        if self.stride > self.window:
            raise ValueError(f"stride {self.stride} exceeds window {self.window}")

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "stride": self.stride,
            "baseline_value": self.baseline_value,
            "overlap": self.overlap.value,
        }


@dataclass(frozen=True)
class SensitivityMap:
    image: np.ndarray
    window: int
    stride: int
    overlap: OverlapMode = OverlapMode.OVERWRITE
    normalized: bool = False
    covered: np.ndarray | None = None

    @property
    def uncovered_pixels(self) -> int:
        if self.covered is None:
            return 0
        return int((~self.covered).sum())

    def sidecar(self) -> dict:
        return {
            "window": self.window,
            "stride": self.stride,
            "overlap": OverlapMode(self.overlap).value,
            "normalized": self.normalized,
            "height": int(self.image.shape[0]),
            "width": int(self.image.shape[1]),
            "uncovered_pixels": self.uncovered_pixels,
        }


def window_positions(h: int, w: int, window: int, stride: int):
    """Row-major lattice of top-left corners for full windows."""
    return [(y, x) for y in range(0, h - window + 1, stride)
            for x in range(0, w - window + 1, stride)]


def _box_sums(a: np.ndarray, window: int) -> np.ndarray:
    """Sum of ``a`` over every ``window x window`` box, indexed by top-left."""
    s = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    s[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    return s[window:, window:] - s[:-window, window:] - s[window:, :-window] + s[:-window, :-window]


def sensitivity_map(pair: PairedSample, config: OcclusionConfig | None = None) -> SensitivityMap:
    cfg = config or OcclusionConfig()
    b = np.asarray(pair.clean, dtype=np.float64)
    p = np.asarray(pair.perturbed, dtype=np.float64)
    h, w = b.shape[:2]
    if cfg.window > min(h, w):
        raise ValueError(f"window {cfg.window} larger than image {h}x{w}")

    # Only the window's own contribution changes between positions, so each
    # score is total - |b - p|_window + |baseline - p|_window.
    diff = np.abs(b - p)
    occ = np.abs(cfg.baseline_value - p)
    if diff.ndim == 3:
        diff = diff.sum(axis=2)
        occ = occ.sum(axis=2)
    n = b.size
    total = diff.sum()
    removed = _box_sums(diff, cfg.window)
    added = _box_sums(occ, cfg.window)

    heat = np.zeros((h, w))
    covered = np.zeros((h, w), dtype=bool)
    counts = np.zeros((h, w)) if cfg.overlap is OverlapMode.AVERAGE else None
    win = cfg.window
    for y, x in window_positions(h, w, win, cfg.stride):
        score = (total - removed[y, x] + added[y, x]) / n
        if counts is None:
            heat[y:y + win, x:x + win] = score
        else:
            heat[y:y + win, x:x + win] += score
            counts[y:y + win, x:x + win] += 1
        covered[y:y + win, x:x + win] = True
    if counts is not None:
        np.divide(heat, counts, out=heat, where=counts > 0)
    return SensitivityMap(heat, win, cfg.stride, cfg.overlap, False, covered)


def normalize_map(smap: SensitivityMap) -> SensitivityMap:
    """Min-max scale to [0, 1].

    A constant nonzero map becomes all ones and a zero map stays zero.
    """
    a = np.asarray(smap.image, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if hi == lo:
        out = np.ones_like(a) if hi != 0 else np.zeros_like(a)
    else:
        out = (a - lo) / (hi - lo)
    return SensitivityMap(out, smap.window, smap.stride, smap.overlap, True, smap.covered)


def aggregate_maps(maps: Sequence[SensitivityMap]) -> SensitivityMap:
    """Pixelwise mean of maps from one perturbation family."""
    maps = list(maps)
    if not maps:
        raise ValueError("aggregate_maps needs at least one map")
    shape = maps[0].image.shape
    for m in maps[1:]:
        if m.image.shape != shape:
            raise ValueError(f"map shape {m.image.shape} differs from {shape}")
    if len(maps) == 1:
        return maps[0]
    acc = np.zeros(shape)
    for m in maps:
        acc += m.image
    covered = None
    if all(m.covered is not None for m in maps):
        covered = np.logical_or.reduce([m.covered for m in maps])
    first = maps[0]
    return SensitivityMap(acc / len(maps), first.window, first.stride, first.overlap,
                          all(m.normalized for m in maps), covered)


def map_difference(a: SensitivityMap, b: SensitivityMap, gamma: float = 0.5) -> np.ndarray:
    """Contrast-compressed absolute difference ``|a - b| ** gamma``."""
    if a.image.shape != b.image.shape:
        raise ValueError(f"map shapes differ: {a.image.shape} vs {b.image.shape}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return np.abs(np.asarray(a.image) - np.asarray(b.image)) ** gamma
