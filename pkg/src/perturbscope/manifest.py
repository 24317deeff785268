"""Run manifests: every emitted file with its SHA-256 digest."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
from dataclasses import dataclass, field

from . import __version__

MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class ArtifactRow:
    stage: str
    inputs: list
    path: str
    sha256: str = ""

    def to_dict(self) -> dict:
        return {"stage": self.stage, "inputs": list(self.inputs), "path": self.path, "sha256": self.sha256}


@dataclass
class RunManifest:
    config: dict
    artifacts: list = field(default_factory=list)
    tool_version: str = __version__
    timestamp: str = ""

    def add(self, stage: str, inputs, path: str) -> None:
        self.artifacts.append(ArtifactRow(stage, list(inputs), path.replace(os.sep, "/")))

    def finalize(self, root) -> None:
        """Digest every artifact; the artifact list is sorted by path."""
        root = os.fspath(root)
        seen = set()
        for row in self.artifacts:
            if row.path in seen:
                raise ValueError(f"artifact listed twice: {row.path}")
            seen.add(row.path)
            row.sha256 = sha256_file(os.path.join(root, row.path))
        self.artifacts.sort(key=lambda r: r.path)
        if not self.timestamp:
            self.timestamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")

    def to_dict(self) -> dict:
        return {
            "tool": "perturbscope",
            "tool_version": self.tool_version,
            "timestamp": self.timestamp,
            "config": self.config,
            "artifacts": [r.to_dict() for r in self.artifacts],
        }

    def write(self, root) -> str:
        path = os.path.join(os.fspath(root), MANIFEST_NAME)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def read(cls, root) -> "RunManifest":
        with open(os.path.join(os.fspath(root), MANIFEST_NAME), encoding="utf-8") as fh:
            d = json.load(fh)
        rows = [ArtifactRow(a["stage"], a["inputs"], a["path"], a["sha256"]) for a in d["artifacts"]]
        return cls(d["config"], rows, d.get("tool_version", ""), d.get("timestamp", ""))

    def digests(self) -> dict:
        return {r.path: r.sha256 for r in self.artifacts}


def verify(root, manifest: RunManifest) -> list:
    """Problems found: missing files, digest mismatches and unlisted files."""
    root = os.fspath(root)
    problems = []
    listed = set()
    for row in manifest.artifacts:
        listed.add(row.path)
        full = os.path.join(root, row.path)
        if not os.path.isfile(full):
            problems.append(f"missing: {row.path}")
        elif row.sha256 and sha256_file(full) != row.sha256:
            problems.append(f"digest mismatch: {row.path}")
    for dirpath, _, files in os.walk(root):
        for name in files:
            rel = os.path.relpath(os.path.join(dirpath, name), root).replace(os.sep, "/")
            if rel != MANIFEST_NAME and rel not in listed:
                problems.append(f"unlisted: {rel}")
    return sorted(problems)
