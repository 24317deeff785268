"""Batch orchestration: synthesis runs, per-pair analysis and dataset batches.

Every command writes its outputs beneath ``output_dir`` and finishes by
writing ``manifest.json`` listing each file with its SHA-256. Work is spread
over a process pool; results are committed in input order, so outputs do not
depend on the worker count.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import detection as det
from . import fingerprint as fpr
from . import occlusion as occ
from . import plotting
from . import spectral as spc
from .config import RunConfig
from .errors import PerturbscopeError
from .imaging import PairedSample, load_pair, load_png, save_png, to_grayscale, u8_to_f32
from .manifest import RunManifest
from .pmap import write_pmap
from .synthesis import grid, read_grid_manifest

log = logging.getLogger(__name__)

INDEX_NAME = "index.json"


class NoSamplesError(PerturbscopeError):
    pass


def bundled_base_path() -> str:
    return str(resources.files("perturbscope") / "data" / "base.png")


def bundled_samples() -> list:
    root = resources.files("perturbscope") / "data" / "samples"
    return sorted(str(p) for p in root.iterdir() if p.name.endswith(".png"))


def resolve_threshold(cfg: RunConfig) -> float:
    thr = cfg.detection.threshold
    rec = cfg.detection.reconstructor or ""
    if thr is None:
        if not rec.startswith("external:"):
            log.warning("no --threshold given for a built-in reconstructor; using %.2f bits, "
                        "which was calibrated for a learned reconstructor", det.DEFAULT_THRESHOLD)
        thr = det.DEFAULT_THRESHOLD
    return float(thr)


def build_reconstructor(cfg: RunConfig, delta_path: str | None) -> det.Reconstructor:
    spec = cfg.detection.reconstructor or ("oracle" if delta_path else "paired")
    if spec == "highpass":
        return det.HighPassReconstructor(cfg.detection.highpass_size)
    return det.make_reconstructor(spec, delta=delta_path, timeout=cfg.detection.timeout)


# --- synth -----------------------------------------------------------------


def run_synth(cfg: RunConfig, out_dir=None, manifest: RunManifest | None = None, prefix: str = ""):
    """Synthesize the configured grid; returns the grid result and manifest."""
    out_dir = os.fspath(out_dir or cfg.output_dir)
    base_path = cfg.grid.base or bundled_base_path()
    base = load_png(base_path)
    sources = {}
    for kind, (clean_p, pert_p) in cfg.grid.sources.items():
        sources[kind] = load_pair(clean_p, pert_p, label=kind)
    synth_dir = os.path.join(out_dir, prefix) if prefix else out_dir
    result = grid(base, synth_dir, cfg.grid.masks, cfg.grid.noises, cfg.grid.lightness,
                  seed=cfg.master_seed, sources=sources, workers=cfg.workers, config=cfg.synthesis)
    save_png(base, os.path.join(synth_dir, "base.png"))

    own = manifest is None
    if own:
        manifest = RunManifest(cfg.to_dict())

    def rel(p):
        return os.path.join(prefix, p) if prefix else p

    manifest.add("synth", [os.path.basename(base_path)], rel("base.png"))
    for row in result.rows:
        inputs = ["base.png", row.mask, row.noise, f"L={row.lightness:.2f}", f"seed={row.seed}"]
        manifest.add("synth", inputs, rel(row.image_path))
        manifest.add("synth", inputs, rel(row.delta_path))
    manifest.add("synth", [], rel("grid_manifest.json"))
    if own:
        manifest.finalize(out_dir)
        manifest.write(out_dir)
    return result, manifest


# --- per-pair analysis -----------------------------------------------------


@dataclass
class PairTask:
    pair_id: str
    clean_path: str
    perturbed_path: str
    label: str
    base_id: str
    groups: dict = field(default_factory=dict)
    delta_path: str | None = None


@dataclass
class PairOutcome:
    pair_id: str
    label: str
    base_id: str
    groups: dict
    artifacts: list = field(default_factory=list)
    detection: dict | None = None
    fingerprint: np.ndarray | None = None
    sensitivity: np.ndarray | None = None
    error: str | None = None


def analyze_pair(pair: PairedSample, out_dir, rel_dir: str, cfg: RunConfig,
                 rec: det.Reconstructor, threshold: float, inputs=()) -> PairOutcome:
    """Occlusion, spectra, radial profiles and detection for one pair.

    Files land in ``out_dir/rel_dir``; the returned artifact rows use paths
    relative to ``out_dir``.
    """
    out_dir = os.fspath(out_dir)
    target = os.path.join(out_dir, rel_dir)
    os.makedirs(target, exist_ok=True)
    keep = cfg.batch.keep_planes
    artifacts = []

    def emit(stage, name):
        artifacts.append((stage, list(inputs), os.path.join(rel_dir, name)))
        return os.path.join(target, name)

    smap = occ.normalize_map(occ.sensitivity_map(pair, cfg.occlusion))
    if keep:
        write_pmap(smap.image, emit("occlusion", "occlusion.pmap"))
    save_png(plotting.scaled_gray(smap.image), emit("occlusion", "occlusion.png"))
    with open(emit("occlusion", "occlusion.json"), "w", encoding="utf-8") as fh:
        json.dump(smap.sidecar(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    spectra = spc.fingerprint_pair(pair)
    if keep:
        write_pmap(spectra.clean.mag, emit("spectral", "spectrum_clean.pmap"))
        write_pmap(spectra.perturbed.mag, emit("spectral", "spectrum_perturbed.pmap"))
        write_pmap(spectra.diff.delta, emit("spectral", "spectral_diff.pmap"))
    save_png(plotting.scaled_gray(spectra.clean.mag), emit("spectral", "spectrum_clean.png"))
    save_png(plotting.scaled_gray(spectra.perturbed.mag), emit("spectral", "spectrum_perturbed.png"))
    save_png(plotting.signed_rgb(spectra.diff.delta), emit("spectral", "spectral_diff.png"))
    spc.write_profile_csv(spectra.profile_clean, emit("spectral", "radial_clean.csv"))
    spc.write_profile_csv(spectra.profile_perturbed, emit("spectral", "radial_perturbed.csv"))

    result = det.detect(pair.perturbed, rec, threshold, pair.clean, cfg.detection.bins)
    write_pmap(result.delta_hat.plane, emit("detection", "delta_hat.pmap"))
    with open(emit("detection", "detection.json"), "w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    fp = fpr.build_fingerprint(spectra, result, base_image_id="", protection_label=pair.label)
    return PairOutcome(pair.sample_id, pair.label, "", {}, artifacts, result.to_dict(),
                       fp.vector, smap.image.astype(np.float32))


_BATCH_CTX: dict = {}


def _init_batch(ctx):
    _BATCH_CTX.clear()
    _BATCH_CTX.update(ctx)


def _pair_task(task: PairTask) -> PairOutcome:
    cfg = _BATCH_CTX["config"]
    try:
        pair = load_pair(task.clean_path, task.perturbed_path, label=task.label, sample_id=task.pair_id)
        rec = build_reconstructor(cfg, task.delta_path)
        out = analyze_pair(pair, _BATCH_CTX["out_dir"], os.path.join("pairs", task.pair_id), cfg, rec,
                           _BATCH_CTX["threshold"], inputs=_BATCH_CTX["inputs"](task))
    except (PerturbscopeError, ValueError, OSError) as exc:
        # no partial outputs for a failed pair
        shutil.rmtree(os.path.join(_BATCH_CTX["out_dir"], "pairs", task.pair_id), ignore_errors=True)
        return PairOutcome(task.pair_id, task.label, task.base_id, task.groups, error=str(exc))
    out.base_id = task.base_id
    out.groups = task.groups
    return out


def _task_inputs(task: PairTask) -> list:
    return [os.path.basename(task.clean_path), os.path.basename(task.perturbed_path)]


def run_analyze_pair(clean_path, perturbed_path, cfg: RunConfig, pair_id: str | None = None,
                     delta_path: str | None = None):
    """Single-pair analysis; input problems raise before anything is written."""
    out_dir = cfg.output_dir
    pair_id = pair_id or os.path.splitext(os.path.basename(perturbed_path))[0]
    pair = load_pair(clean_path, perturbed_path, label="pair", sample_id=pair_id)
    rec = build_reconstructor(cfg, delta_path)
    threshold = resolve_threshold(cfg)
    os.makedirs(out_dir, exist_ok=True)
    outcome = analyze_pair(pair, out_dir, pair_id, cfg, rec, threshold,
                           inputs=[os.path.basename(clean_path), os.path.basename(perturbed_path)])
    manifest = RunManifest(cfg.to_dict())
    for stage, inputs, path in outcome.artifacts:
        manifest.add(stage, inputs, path)
    _write_index(out_dir, [(pair_id, "pair", pair_id)], manifest)
    manifest.finalize(out_dir)
    manifest.write(out_dir)
    return outcome, manifest


def _write_index(out_dir, pairs, manifest: RunManifest, extra=None):
    index = {
        "pairs": [{"pair_id": pid, "label": label, "dir": d.replace(os.sep, "/")} for pid, label, d in pairs],
    }
    if extra:
        index.update(extra)
    with open(os.path.join(out_dir, INDEX_NAME), "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.add("index", [], INDEX_NAME)


# --- batch -----------------------------------------------------------------


def pair_tasks_from_dir(pairs_dir) -> tuple:
    """``pairs_dir/clean/<name>.png`` matched with ``pairs_dir/<label>/<name>.png``."""
    pairs_dir = os.fspath(pairs_dir)
    clean_dir = os.path.join(pairs_dir, "clean")
    if not os.path.isdir(clean_dir):
        raise NoSamplesError(f"{pairs_dir}: no 'clean' subdirectory")
    clean = {os.path.splitext(n)[0]: os.path.join(clean_dir, n)
             for n in sorted(os.listdir(clean_dir)) if n.lower().endswith(".png")}
    tasks, orphans = [], []
    for label in sorted(os.listdir(pairs_dir)):
        label_dir = os.path.join(pairs_dir, label)
        if label == "clean" or not os.path.isdir(label_dir):
            continue
        for name in sorted(os.listdir(label_dir)):
            if not name.lower().endswith(".png"):
                continue
            stem = os.path.splitext(name)[0]
            if stem not in clean:
                orphans.append(os.path.join(label, name))
                continue
            tasks.append(PairTask(f"{label}__{stem}", clean[stem], os.path.join(label_dir, name),
                                  label, stem, {"label": label}))
    return tasks, clean, orphans


def pair_tasks_from_grid(grid_dir) -> tuple:
    grid_dir = os.fspath(grid_dir)
    rows = read_grid_manifest(os.path.join(grid_dir, "grid_manifest.json"))
    base = os.path.join(grid_dir, "base.png")
    tasks = []
    for row in rows:
        stem = os.path.splitext(os.path.basename(row.image_path))[0]
        tasks.append(PairTask(stem, base, os.path.join(grid_dir, row.image_path), row.noise, "base",
                              {"mask": row.mask, "noise": row.noise, "lightness": row.lightness},
                              os.path.join(grid_dir, row.delta_path)))
    return tasks, {"base": base}, []


@dataclass
class BatchOutcome:
    manifest: RunManifest
    failures: list
    outcomes: list

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0


def run_batch(cfg: RunConfig) -> BatchOutcome:
    """Analyze every pair, then summarise, cluster and aggregate.

    Inputs come from ``cfg.pairs_dir``, an existing ``cfg.grid_dir``, or
    (when neither is set) a grid synthesized into ``output_dir/synth``.
    """
    out_dir = cfg.output_dir
    manifest = RunManifest(cfg.to_dict())
    if cfg.pairs_dir:
        tasks, cleans, orphans = pair_tasks_from_dir(cfg.pairs_dir)
        group_kinds = ("label",)
    else:
        grid_dir = cfg.grid_dir
        if not grid_dir:
            os.makedirs(out_dir, exist_ok=True)
            run_synth(cfg, out_dir, manifest, prefix="synth")
            grid_dir = os.path.join(out_dir, "synth")
        tasks, cleans, orphans = pair_tasks_from_grid(grid_dir)
        group_kinds = ("mask", "noise", "lightness")
    if not tasks:
        raise NoSamplesError("no samples")
    os.makedirs(out_dir, exist_ok=True)
    threshold = resolve_threshold(cfg)

    ctx = {"config": cfg, "out_dir": out_dir, "threshold": threshold, "inputs": _task_inputs}
    if cfg.workers <= 1:
        _init_batch(ctx)
        outcomes = [_pair_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers, initializer=_init_batch,
                                 initargs=(ctx,)) as pool:
            outcomes = list(pool.map(_pair_task, tasks))

    failures = [{"pair_id": o.pair_id, "error": o.error} for o in outcomes if o.error]
    failures += [{"pair_id": p, "error": "no matching clean image"} for p in orphans]
    ok = [o for o in outcomes if not o.error]
    for o in ok:
        for stage, inputs, path in o.artifacts:
            manifest.add(stage, inputs, path)

    _write_detection_tables(out_dir, outcomes, group_kinds, manifest)
    _write_fingerprints(out_dir, ok, cleans, manifest)
    _write_aggregates(out_dir, ok, manifest)
    _write_index(out_dir, [(o.pair_id, o.label, os.path.join("pairs", o.pair_id)) for o in ok], manifest,
                 extra={"group_kinds": list(group_kinds)})
    if failures:
        with open(os.path.join(out_dir, "failures.json"), "w", encoding="utf-8") as fh:
            json.dump(failures, fh, indent=2, sort_keys=True)
            fh.write("\n")
        manifest.add("batch", [], "failures.json")
        for f in failures:
            log.error("pair %s failed: %s", f["pair_id"], f["error"])
    manifest.finalize(out_dir)
    manifest.write(out_dir)
    return BatchOutcome(manifest, failures, outcomes)


def _write_detection_tables(out_dir, outcomes, group_kinds, manifest):
    rows = []
    for o in outcomes:
        if o.error:
            rows.append(det.DetectionRow(o.pair_id, o.groups, None, None, missing=True))
        else:
            rows.append(det.DetectionRow(o.pair_id, o.groups, o.detection["entropy"], o.detection["detected"]))
    from .synthesis import MaskKind, NoiseKind
    orders = {"mask": [m.value for m in MaskKind], "noise": [n.value for n in NoiseKind]}
    if "lightness" in group_kinds:
        orders["lightness"] = sorted({r.groups["lightness"] for r in rows})
    summary = det.summarize(rows, group_kinds, orders)
    det.write_summary_csv(summary, os.path.join(out_dir, "detection_summary.csv"))
    det.write_results_csv(rows, os.path.join(out_dir, "detection_results.csv"), group_kinds)
    manifest.add("detection", [], "detection_summary.csv")
    manifest.add("detection", [], "detection_results.csv")


def _write_fingerprints(out_dir, ok, cleans, manifest):
    fps = []
    for base_id, path in sorted(cleans.items()):
        gray = to_grayscale(u8_to_f32(load_png(path)))
        fps.append(fpr.build_fingerprint(spc.fft_log_magnitude(gray), base_image_id=base_id,
                                         protection_label="clean", sample_id=f"clean__{base_id}"))
    for o in ok:
        fps.append(fpr.Fingerprint(o.fingerprint, o.base_id, o.label, o.pair_id))
    report = {"n": len(fps)}
    embedding = None
    if len(fps) >= 3:
        embedding = fpr.project_2d(fps)
        report["pca_degenerate"] = embedding.degenerate
        report["pca_explained"] = list(embedding.explained)
    for key, by in (("silhouette_by_base", "base"), ("silhouette_by_label", "label")):
        try:
            report[key] = fpr.cluster_quality(fps, by)
        except (ValueError, PerturbscopeError) as exc:
            report[key] = None
            report[key + "_note"] = str(exc)
    fpr.write_fingerprints_csv(fps, os.path.join(out_dir, "fingerprints.csv"), embedding)
    manifest.add("fingerprint", [], "fingerprints.csv")
    with open(os.path.join(out_dir, "clustering.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.add("fingerprint", [], "clustering.json")
    if embedding is not None:
        fig = plotting.embedding_scatter(embedding.points, [f.protection_label for f in fps],
                                         [f.base_image_id for f in fps])
        plotting.save_figure(fig, os.path.join(out_dir, "embedding.svg"))
        manifest.add("fingerprint", [], "embedding.svg")


def _write_aggregates(out_dir, ok, manifest):
    by_label = {}
    for o in ok:
        by_label.setdefault(o.label, []).append(o)
    aggregates = {}
    for label, members in sorted(by_label.items()):
        shapes = {m.sensitivity.shape for m in members}
        if len(shapes) != 1:
            log.warning("label %s mixes image sizes %s; no aggregate map", label, sorted(shapes))
            continue
        agg = occ.aggregate_maps([
            occ.SensitivityMap(m.sensitivity.astype(np.float64), 0, 0, normalized=True) for m in members
        ]).image
        aggregates[label] = agg
        rel = os.path.join("aggregate", f"{label}.pmap")
        write_pmap(agg, os.path.join(out_dir, rel))
        manifest.add("aggregate", [m.pair_id for m in members], rel)
        rel_png = os.path.join("aggregate", f"{label}.png")
        save_png(plotting.scaled_gray(agg), os.path.join(out_dir, rel_png))
        manifest.add("aggregate", [m.pair_id for m in members], rel_png)
    labels = sorted(aggregates)
    for i, a in enumerate(labels):
        for b in labels[i + 1:]:
            if aggregates[a].shape != aggregates[b].shape:
                continue
            diff = occ.map_difference(occ.SensitivityMap(aggregates[a], 0, 0, normalized=True),
                                      occ.SensitivityMap(aggregates[b], 0, 0, normalized=True))
            rel = os.path.join("aggregate", f"diff__{a}__{b}.png")
            save_png(np.floor(np.clip(diff, 0, 1) * 255 + 0.5).astype(np.uint8), os.path.join(out_dir, rel))
            manifest.add("aggregate", [a, b], rel)
