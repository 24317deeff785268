"""Static HTML report over a finished run directory.

Figures are rendered next to the run's other outputs under ``report/`` and
registered in the run manifest, so the report only ever links to files the
manifest lists. Nothing time-dependent goes into the page body.
"""

from __future__ import annotations

import csv
import html
import json
import os

from . import plotting
from .errors import PerturbscopeError
from .manifest import RunManifest, verify
from .pmap import read_pmap
from .spectral import read_profile_csv

REPORT_DIR = "report"
REPORT_NAME = "report.html"


class ReportError(PerturbscopeError):
    def __init__(self, problems):
        super().__init__("run directory is inconsistent with its manifest:\n  " + "\n  ".join(problems))
        self.problems = problems


def _read_summary(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _table(rows, columns):
    head = "".join(f"<th>{html.escape(c)}</th>" for c in columns)
    body = "\n".join(
        "<tr>" + "".join(f"<td>{html.escape(str(r.get(c, '')))}</td>" for c in columns) + "</tr>"
        for r in rows
    )
    return f"<table>\n<tr>{head}</tr>\n{body}\n</table>"


def build_report(run_dir) -> str:
    """Render figures and ``report/report.html``; returns the report path.

    Raises:
        ReportError: a manifest entry is missing or its digest no longer
            matches. Nothing is written in that case.
    """
    run_dir = os.fspath(run_dir)
    manifest = RunManifest.read(run_dir)
    manifest.artifacts = [a for a in manifest.artifacts if a.stage != "report"]
    # unlisted files (an earlier report, stray edits) do not block rendering
    dangling = [p for p in verify(run_dir, manifest) if not p.startswith("unlisted: ")]
    if dangling:
        raise ReportError(dangling)
    listed = {a.path for a in manifest.artifacts}

    index = {"pairs": []}
    if "index.json" in listed:
        with open(os.path.join(run_dir, "index.json"), encoding="utf-8") as fh:
            index = json.load(fh)

    new_files = []
    sections = []

    def figure(fig, name):
        rel = f"{REPORT_DIR}/{name}"
        plotting.save_figure(fig, os.path.join(run_dir, rel))
        new_files.append(rel)
        return name

    pairs = index.get("pairs", [])
    if not pairs:
        sections.append("<p class='notice'>no samples</p>")

    if "detection_summary.csv" in listed:
        summary = _read_summary(os.path.join(run_dir, "detection_summary.csv"))
        blocks = {}
        for r in summary:
            if r["group_kind"] == "missing" or not r["mean_entropy_bits"]:
                continue
            blocks.setdefault(r["group_kind"], []).append(
                (r["group_value"], float(r["mean_entropy_bits"]), float(r["detect_rate_pct"])))
        parts = ["<h2>Detection summary</h2>",
                 _table(summary, ["group_kind", "group_value", "n", "mean_entropy_bits", "detect_rate_pct"])]
        if blocks:
            name = figure(plotting.summary_bars(blocks), "summary.png")
            parts.append(f"<img src='{name}' alt='detection summary'>")
        sections.append("\n".join(parts))

    if "embedding.svg" in listed or "clustering.json" in listed:
        parts = ["<h2>Fingerprint clustering</h2>"]
        if "clustering.json" in listed:
            with open(os.path.join(run_dir, "clustering.json"), encoding="utf-8") as fh:
                clus = json.load(fh)
            parts.append(_table([{"metric": k, "value": v} for k, v in sorted(clus.items())], ["metric", "value"]))
        if "embedding.svg" in listed:
            parts.append("<img src='../embedding.svg' alt='fingerprint embedding'>")
        sections.append("\n".join(parts))

    aggregates = sorted(p for p in listed if p.startswith("aggregate/") and p.endswith(".png"))
    if aggregates:
        imgs = "\n".join(
            f"<figure><img src='../{html.escape(p)}' width='256'><figcaption>{html.escape(os.path.basename(p))}"
            "</figcaption></figure>" for p in aggregates)
        sections.append("<h2>Aggregate sensitivity maps</h2>\n" + imgs)

    if pairs:
        parts = ["<h2>Pairs</h2>"]
        for entry in pairs:
            d = entry["dir"]
            pid = entry["pair_id"]
            planes = [f"{d}/{n}.pmap" for n in ("occlusion", "spectrum_clean", "spectrum_perturbed", "spectral_diff")]
            if all(p in listed for p in planes):
                occ_plane, mag_c, mag_p, delta = (read_pmap(os.path.join(run_dir, p)) for p in planes)
                prof_c = read_profile_csv(os.path.join(run_dir, d, "radial_clean.csv"))
                prof_p = read_profile_csv(os.path.join(run_dir, d, "radial_perturbed.csv"))
                fig = plotting.pair_panel(pid, occ_plane, mag_c, mag_p, delta, prof_c.radii,
                                          prof_c.magnitudes, prof_p.magnitudes)
                name = figure(fig, f"pair__{pid}.png")
                img = f"<img src='{html.escape(name)}' alt='{html.escape(pid)}'>"
            else:
                img = (f"<img src='../{html.escape(d)}/occlusion.png' width='200'>"
                       f"<img src='../{html.escape(d)}/spectral_diff.png' width='200'>")
            det_line = ""
            if f"{d}/detection.json" in listed:
                with open(os.path.join(run_dir, d, "detection.json"), encoding="utf-8") as fh:
                    res = json.load(fh)
                det_line = (f"<p>entropy {res['entropy']:.4f} bits, threshold {res['threshold']:.4f}, "
                            f"detected: {str(res['detected']).lower()} ({html.escape(res['reconstructor_id'])})</p>")
            parts.append(f"<section class='pair'><h3>{html.escape(pid)}</h3>\n{det_line}\n{img}</section>")
        sections.append("\n".join(parts))

    page = "\n".join([
        "<!DOCTYPE html>",
        "<html><head><meta charset='utf-8'><title>perturbscope report</title>",
        "<style>body{font-family:sans-serif;max-width:1300px;margin:auto}"
        "table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:2px 6px;font-size:12px}"
        "figure{display:inline-block;margin:4px}.notice{font-weight:bold}</style>",
        "</head><body>",
        "<h1>perturbscope report</h1>",
        f"<p>{len(pairs)} pair(s) analysed.</p>",
        *sections,
        "</body></html>",
        "",
    ])
    out = os.path.join(run_dir, REPORT_DIR, REPORT_NAME)
    os.makedirs(os.path.dirname(out), exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(page)
    new_files.append(f"{REPORT_DIR}/{REPORT_NAME}")

    for rel in new_files:
        manifest.add("report", ["manifest.json"], rel)
    for a in manifest.artifacts:
        a.sha256 = ""
    manifest.finalize(run_dir)
    manifest.write(run_dir)
    return out
