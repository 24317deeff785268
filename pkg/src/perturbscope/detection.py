"""Entropy-threshold detection and subtraction purification.

A reconstructor estimates the perturbation carried by an image. The
detection statistic is the Shannon entropy (bits) of a 256-bin histogram of
the per-image min-max normalised ``|delta_hat|``; an image is flagged when
that entropy exceeds the threshold. Purification subtracts the estimate.

Absolute entropies depend on the binning convention and on the
reconstructor, so they are only comparable within this package. The default
threshold of 0.07 bits was calibrated for a learned reconstructor and is
kept as a default, not as a calibrated value for the built-ins.
"""

from __future__ import annotations

import csv
import logging
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import AdapterError, PmapFormatError
from .imaging import check_image, f32_to_u8, load_png, save_png, u8_to_f32
from .pmap import decode_pmap, read_pmap

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.07
DEFAULT_BINS = 256


@dataclass(frozen=True)
class PerturbationMap:
    """Reconstructed perturbation; ``delta`` is HxW or HxWx3, signed floats."""

    delta: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=np.float64)
        if d.ndim not in (2, 3) or d.size == 0:
            raise ValueError(f"perturbation map must be a non-empty HxW(xC) array, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("perturbation map contains non-finite samples")
        object.__setattr__(self, "delta", d)

    @property
    def plane(self) -> np.ndarray:
        """Single-plane view used for entropy and PMAP export (channel mean)."""
        return self.delta.mean(axis=2) if self.delta.ndim == 3 else self.delta

    @property
    def shape(self):
        return self.delta.shape[:2]


def shannon_entropy(delta, bins: int = DEFAULT_BINS) -> float:
    if bins < 2:
        raise ValueError("bins must be at least 2")
    plane = delta.plane if isinstance(delta, PerturbationMap) else np.asarray(delta, dtype=np.float64)
    if plane.size == 0:
        raise ValueError("cannot take the entropy of an empty map")
    a = np.abs(plane).ravel()
    lo, hi = a.min(), a.max()
    if hi == lo:
        return 0.0
    u = (a - lo) / (hi - lo)
    idx = np.minimum((u * bins).astype(np.intp), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    p = counts[counts > 0] / a.size
    return float(-(p * np.log2(p)).sum()) + 0.0


# --- reconstructors --------------------------------------------------------


def _as_unit(img, name="image") -> np.ndarray:
    """Unit-interval float view; 8-bit input is rescaled, floats pass through."""
    img = check_image(img, name)
    return u8_to_f32(img) if img.dtype == np.uint8 else np.asarray(img, dtype=np.float64)


class Reconstructor:
    """Produces a perturbation estimate for an image."""

    id = "base"

    def reconstruct(self, image: np.ndarray, clean_ref: np.ndarray | None = None) -> PerturbationMap:
        raise NotImplementedError


class OracleReconstructor(Reconstructor):
    """Returns a stored ground-truth perturbation (a PMAP path or an array)."""

    id = "oracle"

    def __init__(self, delta):
        if isinstance(delta, (str, os.PathLike)):
            self.source = os.fspath(delta)
            delta = read_pmap(delta)
        else:
            self.source = None
        self.delta = np.asarray(delta, dtype=np.float64)

    def reconstruct(self, image, clean_ref=None):
        image = check_image(image)
        if image.shape[:2] != self.delta.shape[:2]:
            raise ValueError(
                f"stored delta is {self.delta.shape[:2]}, image is {image.shape[:2]}"
            )
        return PerturbationMap(self.delta)


class PairedDiffReconstructor(Reconstructor):
    """``image - clean_ref``; needs the true clean image."""

    id = "paired"

    def reconstruct(self, image, clean_ref=None):
        if clean_ref is None:
            raise ValueError("paired reconstructor requires a clean reference")
        image = _as_unit(image)
        clean_ref = _as_unit(clean_ref, "clean_ref")
        if image.shape != clean_ref.shape:
            raise ValueError(f"image {image.shape} and clean reference {clean_ref.shape} differ")
        return PerturbationMap(image - clean_ref)


class HighPassReconstructor(Reconstructor):
    """Blind estimate: image minus its median-filtered self.

    A desk-scale stand-in so the pipeline runs without references or models;
    it does not approximate any learned reconstructor.
    """

    id = "highpass"

    def __init__(self, size: int = 5):
        self.size = size

    def reconstruct(self, image, clean_ref=None):
        img = _as_unit(image)
        footprint = (self.size, self.size) if img.ndim == 2 else (self.size, self.size, 1)
        smooth = ndimage.median_filter(img, size=footprint, mode="reflect")
        return PerturbationMap(img - smooth)


class ExternalReconstructor(Reconstructor):
    """Subprocess adapter: ``<cmd> <input_png> <output_pmap>``.

    The child must exit 0 and leave a well-formed PMAP of the input's size.
    Anything else raises :class:`AdapterError` with the captured output.
    """

    id = "external"

    def __init__(self, command, timeout: float = 120.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("external reconstructor command is empty")
        self.timeout = timeout

    def reconstruct(self, image, clean_ref=None):
        image = check_image(image)
        raw = image if image.dtype == np.uint8 else f32_to_u8(image)
        with tempfile.TemporaryDirectory(prefix="perturbscope-") as tmp:
            in_path = os.path.join(tmp, "input.png")
            out_path = os.path.join(tmp, "delta.pmap")
            save_png(raw, in_path)
            argv = [*self.command, in_path, out_path]
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except subprocess.TimeoutExpired as exc:
                raise AdapterError(
                    f"adapter timed out after {self.timeout}s: {shlex.join(argv)}",
                    stdout=_text(exc.stdout), stderr=_text(exc.stderr),
                ) from exc
            except OSError as exc:
                raise AdapterError(f"cannot launch adapter {self.command[0]!r}: {exc}") from exc
            if proc.returncode != 0:
                raise AdapterError(
                    f"adapter exited with status {proc.returncode}: {proc.stderr.strip()[-500:]}",
                    returncode=proc.returncode, stdout=proc.stdout, stderr=proc.stderr,
                )
            try:
                with open(out_path, "rb") as fh:
                    plane = decode_pmap(fh.read())
            except FileNotFoundError as exc:
                raise AdapterError("adapter exited 0 but wrote no PMAP",
                                   returncode=0, stdout=proc.stdout, stderr=proc.stderr) from exc
            except PmapFormatError as exc:
                raise AdapterError(f"adapter wrote a malformed PMAP: {exc}",
                                   returncode=0, stdout=proc.stdout, stderr=proc.stderr) from exc
        if plane.shape != image.shape[:2]:
            raise AdapterError(f"adapter PMAP is {plane.shape}, expected {image.shape[:2]}",
                               returncode=0, stdout=proc.stdout, stderr=proc.stderr)
        if not np.all(np.isfinite(plane)):
            raise AdapterError("adapter PMAP contains non-finite samples", returncode=0)
        return PerturbationMap(plane)


def _text(data) -> str:
    if data is None:
        return ""
    return data.decode("utf-8", "replace") if isinstance(data, bytes) else data


def make_reconstructor(spec: str, delta=None, timeout: float = 120.0) -> Reconstructor:
    """Build a reconstructor from its CLI spelling (``external:CMD`` etc.)."""
    if spec == "oracle":
        if delta is None:
            raise ValueError("oracle reconstructor needs a ground-truth delta")
        return OracleReconstructor(delta)
    if spec == "paired":
        return PairedDiffReconstructor()
    if spec == "highpass":
        return HighPassReconstructor()
    if spec.startswith("external:"):
        return ExternalReconstructor(spec[len("external:"):], timeout=timeout)
    raise ValueError(f"unknown reconstructor {spec!r}")


# --- detect / purify -------------------------------------------------------


@dataclass(frozen=True)
class DetectionResult:
    entropy: float
    threshold: float
    detected: bool
    reconstructor_id: str
    histogram_bins: int = DEFAULT_BINS
    delta_hat: PerturbationMap | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "entropy": self.entropy,
            "threshold": self.threshold,
            "detected": self.detected,
            "reconstructor_id": self.reconstructor_id,
            "histogram_bins": self.histogram_bins,
        }


def detect(image, rec: Reconstructor, threshold: float = DEFAULT_THRESHOLD,
           clean_ref=None, bins: int = DEFAULT_BINS) -> DetectionResult:
    delta = rec.reconstruct(image, clean_ref)
    h = shannon_entropy(delta, bins)
    return DetectionResult(h, threshold, bool(h > threshold), rec.id, bins, delta)


def subtract(image, delta: PerturbationMap, clip_output: bool = True) -> np.ndarray:
    x = _as_unit(image)
    d = delta.delta
    if d.shape[:2] != x.shape[:2]:
        raise ValueError(f"perturbation {d.shape[:2]} does not match image {x.shape[:2]}")
    if x.ndim == 3 and d.ndim == 2:
        d = d[..., None]
    elif x.ndim == 2 and d.ndim == 3:
        d = d.mean(axis=2)
    out = x - d
    return np.clip(out, 0.0, 1.0) if clip_output else out


def purify(image, rec: Reconstructor, clean_ref=None, clip_output: bool = True) -> np.ndarray:
    """``clip(x - delta_hat, 0, 1)``; single-plane estimates hit every channel."""
    return subtract(image, rec.reconstruct(image, clean_ref), clip_output)


def psnr(a, b, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(peak * peak / mse)


# --- batch -----------------------------------------------------------------


@dataclass(frozen=True)
class DetectionRow:
    image_path: str
    groups: dict
    entropy: float | None
    detected: bool | None
    missing: bool = False


@dataclass(frozen=True)
class SummaryRow:
    group_kind: str
    group_value: str
    n: int
    mean_entropy_bits: float | None
    detect_rate_pct: float | None


@dataclass
class BatchDetection:
    rows: list
    summary: list
    threshold: float

    @property
    def missing(self) -> list:
        return [r.image_path for r in self.rows if r.missing]


def _row_get(row, key):
    return row[key] if isinstance(row, dict) else getattr(row, key)


def summarize(rows: Sequence[DetectionRow], group_kinds: Sequence[str],
              orders: dict | None = None) -> list:
    """Mean entropy and detection rate per value of each grouping key."""
    orders = orders or {}
    out = []
    for kind in group_kinds:
        values = []
        for r in rows:
            v = r.groups.get(kind)
            if v is not None and v not in values:
                values.append(v)
        if kind in orders:
            rank = {v: i for i, v in enumerate(orders[kind])}
            values.sort(key=lambda v: (rank.get(v, len(rank)), str(v)))
        for value in values:
            members = [r for r in rows if r.groups.get(kind) == value and not r.missing]
            if members:
                mean_h = float(np.mean([r.entropy for r in members]))
                rate = 100.0 * sum(r.detected for r in members) / len(members)
            else:
                mean_h = rate = None
            out.append(SummaryRow(kind, _fmt_group(value), len(members), mean_h, rate))
    for r in rows:
        if r.missing:
            out.append(SummaryRow("missing", r.image_path, 0, None, None))
    return out


def _fmt_group(value) -> str:
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


def batch_detect(manifest_rows: Iterable, rec, threshold: float = DEFAULT_THRESHOLD,
                 root=".", clean_ref=None, bins: int = DEFAULT_BINS) -> BatchDetection:
    """Detect over grid manifest rows and summarise by mask, noise, lightness.

    ``rec`` is a :class:`Reconstructor` or the string ``"oracle"``, which
    reads each row's stored ground-truth delta. Rows whose files are missing
    are reported rather than aborting the batch.
    """
    from .synthesis import MaskKind, NoiseKind

    root = os.fspath(root)
    results = []
    for row in manifest_rows:
        image_rel = _row_get(row, "image_path")
        groups = {
            "mask": _row_get(row, "mask"),
            "noise": _row_get(row, "noise"),
            "lightness": float(_row_get(row, "lightness")),
        }
        image_path = os.path.join(root, image_rel)
        try:
            image = u8_to_f32(load_png(image_path))
            r = rec
            if rec == "oracle":
                r = OracleReconstructor(os.path.join(root, _row_get(row, "delta_path")))
        except (OSError, PmapFormatError) as exc:
            log.error("skipping %s: %s", image_rel, exc)
            results.append(DetectionRow(image_rel, groups, None, None, missing=True))
            continue
        res = detect(image, r, threshold, clean_ref, bins)
        results.append(DetectionRow(image_rel, groups, res.entropy, res.detected))
    orders = {
        "mask": [m.value for m in MaskKind],
        "noise": [n.value for n in NoiseKind],
        "lightness": sorted({r.groups["lightness"] for r in results}),
    }
    summary = summarize(results, ("mask", "noise", "lightness"), orders)
    return BatchDetection(results, summary, threshold)


SUMMARY_COLUMNS = ("group_kind", "group_value", "n", "mean_entropy_bits", "detect_rate_pct")


def write_summary_csv(summary: Sequence[SummaryRow], path) -> None:
    path = os.fspath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for s in summary:
            writer.writerow([
                s.group_kind, s.group_value, s.n,
                "" if s.mean_entropy_bits is None else f"{s.mean_entropy_bits:.6f}",
                "" if s.detect_rate_pct is None else f"{s.detect_rate_pct:.2f}",
            ])


def write_results_csv(rows: Sequence[DetectionRow], path, group_kinds: Sequence[str]) -> None:
    path = os.fspath(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_path", *group_kinds, "entropy_bits", "detected", "missing"])
        for r in rows:
            writer.writerow([
                r.image_path, *(_fmt_group(r.groups.get(k, "")) for k in group_kinds),
                "" if r.entropy is None else f"{r.entropy:.6f}",
                "" if r.detected is None else int(r.detected),
                int(r.missing),
            ])
