"""Run manifests: what was run, with what, and what came out.

A manifest is written as soon as the output directory exists (status
"running") and finalized when the run ends, successfully or not, with a
SHA-256 inventory of every produced file. A stale "running" manifest is
therefore itself evidence of an interrupted run.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .. import __version__ as _artifact_version
from ..numerics import RngStream

__all__ = ["RunManifest", "sha256_file", "MANIFEST_NAME"]

MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    experiment: str
    config: dict
    artifact_version: str = _artifact_version
    prng_algorithm: str = RngStream.algorithm
    status: str = "running"
    started_at_unix: float = 0.0
    finished_at_unix: float | None = None
    wall_clock_seconds: float | None = None
    files: list = field(default_factory=list)
    error: dict | None = None

    @classmethod
    def start(cls, experiment: str, config: dict, out_dir) -> "RunManifest":
        # A rerun into the same directory must not inherit a failure artifact.
        stale = Path(out_dir) / "error.json"
        if stale.exists():
            stale.unlink()
        m = cls(experiment=experiment, config=config, started_at_unix=time.time())
        m.write(out_dir)
        return m

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        payload = {
            "experiment": self.experiment,
            "artifact_version": self.artifact_version,
            "prng_algorithm": self.prng_algorithm,
            "status": self.status,
            "started_at_unix": self.started_at_unix,
            "finished_at_unix": self.finished_at_unix,
            "wall_clock_seconds": self.wall_clock_seconds,
            "config": self.config,
            "files": self.files,
            "error": self.error,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    def finalize(self, out_dir, status: str, error: dict | None = None) -> Path:
        """Record the outcome and digest every file in the output directory
        (the manifest itself excluded)."""
        out = Path(out_dir)
        self.status = status
        self.error = error
        self.finished_at_unix = time.time()
        self.wall_clock_seconds = self.finished_at_unix - self.started_at_unix
        inventory = []
        for p in sorted(out.rglob("*")):
            if p.is_file() and p.name != MANIFEST_NAME:
                rel = p.relative_to(out).as_posix()
                inventory.append(
                    {"path": rel, "sha256": sha256_file(p), "bytes": p.stat().st_size}
                )
        self.files = inventory
        return self.write(out)
