"""Controlled perturbation synthesis.

Procedural masks are combined with noise fields and composited onto a fixed
8-bit base image::

    m' = mask * master_opacity
    c  = clip(b + noise * m', 0, 255)

with ``b`` and ``noise`` in [0, 255] and ``mask`` in [0, 1]. Sweeping every
mask kind, noise kind and mask lightness yields the 6 x 6 x 8 grid.

All randomness flows from integer seeds through :func:`derive_seed`, so a
given (kind, seed, size) always produces the same bytes.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import InfeasibleTargetError
from .imaging import PairedSample, check_image, save_png, to_grayscale, u8_to_f32
from .pmap import write_pmap

log = logging.getLogger(__name__)

LIGHTNESS_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)


class MaskKind(str, enum.Enum):
    UNIFORM = "uniform"
    RADIAL_GRADIENT = "radial-gradient"
    CLOUDS2 = "clouds2"
    DIRECTIONAL = "directional"
    PERLIN_HI = "perlin-hi"
    PERLIN_LOW = "perlin-low"


class NoiseKind(str, enum.Enum):
    GAUSS = "gauss"
    GAUSS_2X = "gauss-2x"
    GAUSS_4X = "gauss-4x"
    RESIDUAL_GLAZE = "residual-glaze"
    RESIDUAL_SHADE = "residual-shade"
    RESIDUAL_SHADE_GLAZE = "residual-shade-glaze"

    @property
    def needs_source(self) -> bool:
        return self.value.startswith("residual-")


_UPSCALE = {NoiseKind.GAUSS_2X: 2, NoiseKind.GAUSS_4X: 4}


@dataclass(frozen=True)
class SynthConfig:
    """Tunable synthesis parameters (none of them are fixed by the method)."""

    noise_mean: float = 127.5
    noise_sigma: float = 40.0
    upscale: str = "bilinear"
    perlin_hi_cells: int = 32
    perlin_low_cells: int = 4
    clouds_cells: int = 4
    clouds_octaves: int = 4
    clouds_persistence: float = 0.5
    directional_angle: float = 45.0
    master_opacity: float = 0.15
    gamma_bounds: tuple = (1e-3, 1e3)
    bisection_iters: int = 100
    lightness_tol: float = 1e-4

    def __post_init__(self):
        if self.upscale not in ("bilinear", "nearest"):
            raise ValueError(f"upscale must be 'bilinear' or 'nearest', got {self.upscale!r}")
        if not 0 < self.master_opacity <= 1:
            raise ValueError("master_opacity must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        d = dict(d)
        if "gamma_bounds" in d:
            d["gamma_bounds"] = tuple(d["gamma_bounds"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma_bounds"] = list(self.gamma_bounds)
        return d


@dataclass(frozen=True)
class Mask:
    image: np.ndarray
    kind: MaskKind
    lightness: float | None = None
    gamma: float | None = None

    @property
    def mean(self) -> float:
        return float(self.image.mean())


@dataclass(frozen=True)
class NoiseField:
    image: np.ndarray
    kind: NoiseKind
    seed: int


@dataclass(frozen=True)
class SynthSpec:
    mask_kind: MaskKind
    noise_kind: NoiseKind
    lightness: float
    master_opacity: float = 0.15
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mask_kind", MaskKind(self.mask_kind))
        object.__setattr__(self, "noise_kind", NoiseKind(self.noise_kind))
        if not 0 < self.lightness < 1:
            raise ValueError(f"lightness must lie in (0, 1), got {self.lightness}")
        if not 0 < self.master_opacity <= 1:
            raise ValueError("master_opacity must lie in (0, 1]")


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary parts (enum members use their value)."""
    tokens = [p.value if isinstance(p, enum.Enum) else p for p in parts]
    digest = hashlib.sha256(repr(tokens).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# --- masks -----------------------------------------------------------------


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin(h: int, w: int, cell: float, rng: np.random.Generator) -> np.ndarray:
    """Gradient-lattice noise sampled at pixel centres, roughly in [-1, 1].

    ``cell`` is the lattice spacing in pixels. Gradients are normalised
    uniform 2-vectors, which avoids platform-dependent trig.
    """
    ys = (np.arange(h) + 0.5) / cell
    xs = (np.arange(w) + 0.5) / cell
    gh = int(np.floor(ys[-1])) + 2
    gw = int(np.floor(xs[-1])) + 2
    g = rng.uniform(-1.0, 1.0, size=(gh, gw, 2))
    norm = np.sqrt(g[..., 0] ** 2 + g[..., 1] ** 2)
    norm[norm == 0] = 1.0
    gx, gy = g[..., 0] / norm, g[..., 1] / norm

    y0 = np.floor(ys).astype(np.intp)[:, None]
    x0 = np.floor(xs).astype(np.intp)[None, :]
    fy = (ys[:, None] - y0)
    fx = (xs[None, :] - x0)

    def corner(oy, ox):
        return gx[y0 + oy, x0 + ox] * (fx - ox) + gy[y0 + oy, x0 + ox] * (fy - oy)

    u, v = _fade(fx), _fade(fy)
    top = corner(0, 0) + u * (corner(0, 1) - corner(0, 0))
    bottom = corner(1, 0) + u * (corner(1, 1) - corner(1, 0))
    return top + v * (bottom - top)


def _rescale01(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi == lo:
        return np.zeros_like(a, dtype=np.float64)
    return (a - lo) / (hi - lo)


# on tiny images a sub-2px lattice would put pixel centres on lattice points,
# where gradient noise is identically zero
MIN_CELL = 2.0


def _cell(w: int, cells: int) -> float:
    return max(w / cells, MIN_CELL)


def make_mask(kind, h: int, w: int, seed: int = 0, config: SynthConfig | None = None) -> Mask:
    """Raw procedural mask in [0, 1], before any lightness adjustment."""
    cfg = config or SynthConfig()
    kind = MaskKind(kind)
    if h < 8 or w < 8:
        raise ValueError(f"mask dimensions must be at least 8x8, got {h}x{w}")
    rng = _rng(seed)

    if kind is MaskKind.UNIFORM:
        img = np.ones((h, w))
    elif kind is MaskKind.RADIAL_GRADIENT:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        d = np.hypot(yy - (h - 1) / 2.0, xx - (w - 1) / 2.0)
        img = 1.0 - d / d.max()
    elif kind is MaskKind.DIRECTIONAL:
        theta = np.deg2rad(cfg.directional_angle)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        img = _rescale01(xx * np.cos(theta) + yy * np.sin(theta))
    elif kind is MaskKind.PERLIN_HI:
        img = _rescale01(perlin(h, w, _cell(w, cfg.perlin_hi_cells), rng))
    elif kind is MaskKind.PERLIN_LOW:
        img = _rescale01(perlin(h, w, _cell(w, cfg.perlin_low_cells), rng))
    else:  # CLOUDS2: fBm over Perlin octaves
        total = np.zeros((h, w))
        amp, cell = 1.0, w / cfg.clouds_cells
        for _ in range(cfg.clouds_octaves):
            total += amp * perlin(h, w, max(cell, MIN_CELL), rng)
            amp *= cfg.clouds_persistence
            cell /= 2.0
        img = _rescale01(total)
    return Mask(np.clip(img, 0.0, 1.0), kind)


def adjust_lightness(mask: Mask, target: float, config: SynthConfig | None = None) -> Mask:
    """Gamma-correct ``mask`` so its mean intensity equals ``target``.

    Solves ``mean(mask ** gamma) == target`` by bisection on ``log(gamma)``.
    The mean is monotone decreasing in gamma, so sample ordering is kept.

    Raises:
        InfeasibleTargetError: no gamma within the configured bounds reaches
            the target within tolerance (e.g. an all-ones or all-zero mask).
    """
    cfg = config or SynthConfig()
    if not 0 < target < 1:
        raise ValueError(f"target lightness must lie in (0, 1), got {target}")
    m = np.asarray(mask.image, dtype=np.float64)
    if not np.any((m > 0) & (m <= 1)):
        raise InfeasibleTargetError(f"{mask.kind.value} mask has no positive samples")

    def mean_at(gamma):
        return float(np.mean(m ** gamma))

    if abs(mean_at(1.0) - target) <= cfg.lightness_tol / 100:
        return Mask(m.copy(), mask.kind, target, 1.0)

    lo, hi = np.log(cfg.gamma_bounds[0]), np.log(cfg.gamma_bounds[1])
    f_lo, f_hi = mean_at(np.exp(lo)), mean_at(np.exp(hi))
    if not (f_hi - cfg.lightness_tol <= target <= f_lo + cfg.lightness_tol):
        raise InfeasibleTargetError(
            f"{mask.kind.value} mask reaches lightness only in [{f_hi:.4f}, {f_lo:.4f}], "
            f"target {target}"
        )
    best_gamma, best_err = 1.0, abs(mean_at(1.0) - target)
    for _ in range(cfg.bisection_iters):
        mid = 0.5 * (lo + hi)
        f = mean_at(np.exp(mid))
        err = abs(f - target)
        if err < best_err:
            best_gamma, best_err = float(np.exp(mid)), err
        if err < 1e-12 or hi - lo < 1e-15:
            break
        if f > target:
            lo = mid
        else:
            hi = mid
    if best_err > cfg.lightness_tol:
        raise InfeasibleTargetError(
            f"bisection stalled {best_err:.2e} away from lightness {target}"
        )
    return Mask(m ** best_gamma, mask.kind, target, best_gamma)


def lightness_mask(mask: Mask, target: float, config: SynthConfig | None = None) -> Mask:
    """Lightness targeting used by the grid.

    A uniform mask cannot move under gamma, so it is scaled by ``target``.
    """
    if mask.kind is MaskKind.UNIFORM:
        return Mask(np.full_like(mask.image, target, dtype=np.float64), mask.kind, target, None)
    return adjust_lightness(mask, target, config)


# --- noise -----------------------------------------------------------------


def _resize(a: np.ndarray, h: int, w: int, method: str) -> np.ndarray:
    sh, sw = a.shape
    ys = (np.arange(h) + 0.5) * (sh / h) - 0.5
    xs = (np.arange(w) + 0.5) * (sw / w) - 0.5
    if method == "nearest":
        iy = np.clip(np.floor(ys + 0.5).astype(np.intp), 0, sh - 1)
        ix = np.clip(np.floor(xs + 0.5).astype(np.intp), 0, sw - 1)
        return a[iy[:, None], ix[None, :]]
    ys = np.clip(ys, 0, sh - 1)
    xs = np.clip(xs, 0, sw - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = a[y0[:, None], x0[None, :]] * (1 - wx) + a[y0[:, None], x1[None, :]] * wx
    bot = a[y1[:, None], x0[None, :]] * (1 - wx) + a[y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy


def make_noise(
    kind,
    h: int,
    w: int,
    seed: int = 0,
    source: PairedSample | None = None,
    config: SynthConfig | None = None,
) -> NoiseField:
    """Single-channel noise field in [0, 255].

    Residual kinds recentre the grey-level tool residual at the Gaussian mean
    and rescale it to the Gaussian standard deviation.
    """
    cfg = config or SynthConfig()
    kind = NoiseKind(kind)
    if kind.needs_source:
        if source is None:
            raise ValueError(f"{kind.value} noise requires a clean/perturbed source pair")
        if source.shape[:2] != (h, w):
            raise ValueError(
                f"{kind.value} source is {source.shape[0]}x{source.shape[1]}, expected {h}x{w}"
            )
        delta = to_grayscale(extract_residual(source)) * 255.0
        spread = float(delta.std())
        if spread == 0:
            return NoiseField(np.full((h, w), cfg.noise_mean), kind, seed)
        gain = cfg.noise_sigma / spread
        img = np.clip(cfg.noise_mean + gain * (delta - delta.mean()), 0.0, 255.0)
        return NoiseField(img, kind, seed)

    rng = _rng(seed)
    factor = _UPSCALE.get(kind, 1)
    sh, sw = -(-h // factor), -(-w // factor)
    small = np.clip(rng.normal(cfg.noise_mean, cfg.noise_sigma, size=(sh, sw)), 0.0, 255.0)
    img = small if factor == 1 else _resize(small, h, w, cfg.upscale)
    return NoiseField(img, kind, seed)


# --- composition -----------------------------------------------------------


def compose(base: np.ndarray, noise: NoiseField, mask: Mask, master_opacity: float = 0.15) -> np.ndarray:
    """Composite masked noise onto an 8-bit base and return the 8-bit result."""
    base = check_image(base, "base")
    if not 0 < master_opacity <= 1:
        raise ValueError("master_opacity must lie in (0, 1]")
    n = np.asarray(noise.image, dtype=np.float64)
    m = np.asarray(mask.image, dtype=np.float64)
    if m.shape != base.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match base {base.shape[:2]}")
    if n.shape[:2] != base.shape[:2]:
        raise ValueError(f"noise shape {n.shape} does not match base {base.shape[:2]}")
    if n.ndim == 3 and base.ndim == 2:
        raise ValueError("multi-channel noise cannot be composed onto a single-channel base")
    weight = m * master_opacity
    increment = n * (weight[..., None] if n.ndim == 3 else weight)
    if base.ndim == 3 and increment.ndim == 2:
        increment = increment[..., None]
    c = np.clip(base.astype(np.float64) + increment, 0.0, 255.0)
    return np.floor(c + 0.5).astype(np.uint8)


def extract_residual(pair: PairedSample) -> np.ndarray:
    """Signed ``perturbed - clean`` in float64 (exact for float32-valued inputs)."""
    return np.asarray(pair.perturbed, dtype=np.float64) - np.asarray(pair.clean, dtype=np.float64)


def ground_truth_delta(base: np.ndarray, composed: np.ndarray) -> np.ndarray:
    """Single-plane perturbation actually applied, in unit-interval scale."""
    d = (composed.astype(np.float64) - base.astype(np.float64)) / 255.0
    return d.mean(axis=2) if d.ndim == 3 else d


def synthesize(base: np.ndarray, spec: SynthSpec, source: PairedSample | None = None,
               config: SynthConfig | None = None) -> np.ndarray:
    """One composed image for a single recipe."""
    cfg = config or SynthConfig()
    h, w = base.shape[:2]
    raw = make_mask(spec.mask_kind, h, w, derive_seed(spec.seed, "mask", spec.mask_kind), cfg)
    mask = lightness_mask(raw, spec.lightness, cfg)
    noise = make_noise(spec.noise_kind, h, w,
                       derive_seed(spec.seed, spec.mask_kind, spec.noise_kind, spec.lightness),
                       source, cfg)
    return compose(base, noise, mask, spec.master_opacity)


# --- stand-in tool residuals ----------------------------------------------


def standin_pair(base: np.ndarray, kind, seed: int = 0) -> PairedSample:
    """Procedural clean/perturbed pair used when no real tool output is supplied.

    These are not Glaze or Nightshade outputs. They only give the residual
    noise kinds something content-coupled and structured to ingest:
    ``residual-glaze`` is edge-aligned texture, ``residual-shade`` a smooth
    low-frequency field, ``residual-shade-glaze`` the two applied in sequence.
    """
    kind = NoiseKind(kind)
    if not kind.needs_source:
        raise ValueError(f"{kind.value} is not a residual noise kind")
    clean = u8_to_f32(base)
    h, w = clean.shape[:2]
    gray = to_grayscale(clean)
    rng = _rng(derive_seed(seed, "standin", kind))

    def glaze_like():
        detail = gray - ndimage.gaussian_filter(gray, 2.0)
        carrier = perlin(h, w, max(w / 48, 1.0), rng)
        return 0.6 * detail + 0.01 * carrier * (np.abs(detail) > 0.01)

    def shade_like():
        return 0.02 * perlin(h, w, w / 3, rng) + 0.008 * perlin(h, w, w / 12, rng)

    if kind is NoiseKind.RESIDUAL_GLAZE:
        delta = glaze_like()
    elif kind is NoiseKind.RESIDUAL_SHADE:
        delta = shade_like()
    else:
        delta = shade_like() + glaze_like()
    if clean.ndim == 3:
        delta = delta[..., None]
    perturbed = np.floor(np.clip(clean + delta, 0, 1) * 255 + 0.5) / 255.0
    return PairedSample(clean, perturbed, label=f"standin-{kind.value}")


# --- grid ------------------------------------------------------------------


@dataclass(frozen=True)
class GridRow:
    mask: str
    noise: str
    lightness: float
    seed: int
    image_path: str
    delta_path: str

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GridResult:
    rows: list
    manifest_path: str
    out_dir: str
    extra: dict = field(default_factory=dict)


_CTX: dict = {}


def _init_worker(ctx):
    _CTX.clear()
    _CTX.update(ctx)
    _CTX["cache"] = {}


def _grid_task(task):
    mask_kind, noise_kind, lightness = task
    ctx = _CTX
    cfg = ctx["config"]
    base = ctx["base"]
    h, w = base.shape[:2]
    key = (mask_kind, lightness)
    try:
        if key not in ctx["cache"]:
            ctx["cache"][key] = lightness_mask(ctx["masks"][mask_kind], lightness, cfg)
        mask = ctx["cache"][key]
        seed = derive_seed(ctx["seed"], mask_kind, noise_kind, lightness)
        noise = make_noise(noise_kind, h, w, seed, ctx["sources"].get(noise_kind), cfg)
        composed = compose(base, noise, mask, cfg.master_opacity)
        stem = f"{mask_kind.value}__{noise_kind.value}__L{lightness:.2f}"
        image_rel = os.path.join("images", stem + ".png")
        delta_rel = os.path.join("deltas", stem + ".pmap")
        save_png(composed, os.path.join(ctx["out_dir"], image_rel))
        write_pmap(ground_truth_delta(base, composed), os.path.join(ctx["out_dir"], delta_rel))
    except Exception as exc:
        raise RuntimeError(
            f"grid combination mask={mask_kind.value} noise={noise_kind.value} "
            f"L={lightness} failed: {exc}"
        ) from exc
    return GridRow(mask_kind.value, noise_kind.value, float(lightness), seed, image_rel, delta_rel)


def grid(
    base: np.ndarray,
    out_dir,
    masks: Sequence = tuple(MaskKind),
    noises: Sequence = tuple(NoiseKind),
    lightness: Sequence[float] = LIGHTNESS_LEVELS,
    seed: int = 0,
    sources: Mapping | None = None,
    workers: int = 1,
    config: SynthConfig | None = None,
) -> GridResult:
    """Synthesize every (mask, noise, lightness) combination onto ``base``.

    Writes ``images/*.png``, ground-truth ``deltas/*.pmap`` and
    ``grid_manifest.json`` under ``out_dir``. Residual noise kinds draw from
    ``sources``; any that are missing fall back to :func:`standin_pair`
    with a warning. A failing combination aborts the whole grid.
    """
    cfg = config or SynthConfig()
    base = check_image(base, "base")
    if base.dtype != np.uint8:
        raise ValueError("grid base must be an 8-bit image")
    masks = [MaskKind(m) for m in masks]
    noises = [NoiseKind(n) for n in noises]
    lightness = [float(v) for v in lightness]
    if not masks or not noises or not lightness:
        raise ValueError("grid needs at least one mask, noise and lightness level")
    h, w = base.shape[:2]
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)

    resolved = {}
    for kind in noises:
        if not kind.needs_source:
            continue
        src = (sources or {}).get(kind) or (sources or {}).get(kind.value)
        if src is None:
            log.warning("no source pair for %s; using a procedural stand-in", kind.value)
            src = standin_pair(base, kind, seed)
        resolved[kind] = src

    ctx = {
        "base": base,
        "masks": {k: make_mask(k, h, w, derive_seed(seed, "mask", k), cfg) for k in masks},
        "sources": resolved,
        "config": cfg,
        "seed": seed,
        "out_dir": out_dir,
    }
    tasks = [(m, n, L) for m in masks for n in noises for L in lightness]
    if workers <= 1:
        _init_worker(ctx)
        rows = [_grid_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(ctx,)) as pool:
            rows = list(pool.map(_grid_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))

    manifest_path = os.path.join(out_dir, "grid_manifest.json")
    write_grid_manifest(rows, manifest_path)
    return GridResult(rows, manifest_path, out_dir)


def write_grid_manifest(rows: Sequence[GridRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in rows], fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_grid_manifest(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [GridRow(**row) for row in json.load(fh)]
