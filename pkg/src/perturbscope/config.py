"""Run configuration: a JSON file with command-line overrides on top."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

from .occlusion import OcclusionConfig
from .synthesis import LIGHTNESS_LEVELS, MaskKind, NoiseKind, SynthConfig

WORKERS_ENV = "PERTURBSCOPE_WORKERS"


@dataclass(frozen=True)
class GridSpec:
    base: str | None = None
    masks: tuple = tuple(m.value for m in MaskKind)
    noises: tuple = tuple(n.value for n in NoiseKind)
    lightness: tuple = LIGHTNESS_LEVELS
    sources: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(MaskKind(m).value for m in self.masks))
        object.__setattr__(self, "noises", tuple(NoiseKind(n).value for n in self.noises))
        object.__setattr__(self, "lightness", tuple(float(v) for v in self.lightness))
        for kind, paths in self.sources.items():
            if not NoiseKind(kind).needs_source or len(paths) != 2:
                raise ValueError(f"source for {kind!r} must be [clean_path, perturbed_path]")


@dataclass(frozen=True)
class DetectionConfig:
    reconstructor: str | None = None
    threshold: float | None = None
    bins: int = 256
    timeout: float = 120.0
    highpass_size: int = 5


@dataclass(frozen=True)
class BatchConfig:
    keep_planes: bool = True


@dataclass(frozen=True)
class RunConfig:
    master_seed: int = 0
    output_dir: str = "perturbscope-out"
    workers: int = 1
    pairs_dir: str | None = None
    grid_dir: str | None = None
    grid: GridSpec = field(default_factory=GridSpec)
    synthesis: SynthConfig = field(default_factory=SynthConfig)
    occlusion: OcclusionConfig = field(default_factory=OcclusionConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)

    def to_dict(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "output_dir": self.output_dir,
            "workers": self.workers,
            "pairs_dir": self.pairs_dir,
            "grid_dir": self.grid_dir,
            "grid": {
                "base": self.grid.base,
                "masks": list(self.grid.masks),
                "noises": list(self.grid.noises),
                "lightness": list(self.grid.lightness),
                "sources": {k: list(v) for k, v in sorted(self.grid.sources.items())},
            },
            "synthesis": self.synthesis.to_dict(),
            "occlusion": self.occlusion.to_dict(),
            "detection": asdict(self.detection),
            "batch": asdict(self.batch),
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {"master_seed", "output_dir", "workers", "pairs_dir", "grid_dir", "grid",
                 "synthesis", "occlusion", "detection", "batch"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {k: d[k] for k in ("master_seed", "output_dir", "workers", "pairs_dir", "grid_dir") if k in d}
        if "grid" in d:
            kwargs["grid"] = GridSpec(**d["grid"])
        if "synthesis" in d:
            kwargs["synthesis"] = SynthConfig.from_dict(d["synthesis"])
        if "occlusion" in d:
            kwargs["occlusion"] = OcclusionConfig(**d["occlusion"])
        if "detection" in d:
            kwargs["detection"] = DetectionConfig(**d["detection"])
        if "batch" in d:
            kwargs["batch"] = BatchConfig(**d["batch"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, **kw) -> "RunConfig":
        """Apply flat CLI-style overrides; ``None`` values are ignored."""
        kw = {k: v for k, v in kw.items() if v is not None}
        cfg = self
        top = {k: kw.pop(k) for k in ("master_seed", "output_dir", "workers", "pairs_dir", "grid_dir") if k in kw}
        if top:
            cfg = replace(cfg, **top)
        occ = {k: kw.pop(k) for k in ("window", "stride", "overlap") if k in kw}
        if occ:
            cfg = replace(cfg, occlusion=replace(cfg.occlusion, **occ))
        det = {k: kw.pop(k) for k in ("reconstructor", "threshold") if k in kw}
        if det:
            cfg = replace(cfg, detection=replace(cfg.detection, **det))
        grid = {k: kw.pop(k) for k in ("base", "masks", "noises", "lightness", "sources") if k in kw}
        if grid:
            cfg = replace(cfg, grid=GridSpec(**{**asdict(cfg.grid), **grid}))
        if kw:
            raise ValueError(f"unknown overrides: {sorted(kw)}")
        return cfg


def resolve_workers(flag: int | None, config_value: int = 1) -> int:
    """``--workers`` wins, then ``PERTURBSCOPE_WORKERS``, then the config."""
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return max(1, int(config_value))
