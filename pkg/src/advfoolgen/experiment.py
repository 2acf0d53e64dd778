"""Experiment directories: fixed subdirectory layout plus a manifest that
records the resolved config, input hashes, and every artifact a stage wrote."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

SUBDIRS = ("checkpoints", "images", "reports", "plots")


def file_hash(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ExperimentDir:
    """Root directory with checkpoints/, images/, reports/, plots/ and manifest.json.

    The manifest is written before a stage produces any output and updated with
    the output list when the stage completes.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def subdir(self, name: str) -> Path:
        if name not in SUBDIRS:
            raise ValueError(f"unknown experiment subdir {name!r}")
        return self.root / name

    def ensure_layout(self) -> None:
        for sub in SUBDIRS:
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def _read_manifest(self) -> dict:
        if self.manifest_path.is_file():
            return json.loads(self.manifest_path.read_text())
        return {"stages": {}}

    def _write_manifest(self, manifest: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def start_stage(self, stage: str, config: dict, inputs: list[str | Path]) -> None:
        self.ensure_layout()
        manifest = self._read_manifest()
        manifest["stages"][stage] = {
            "config": config,
            "inputs": {str(Path(p).relative_to(self.root)) if Path(p).is_relative_to(self.root)
                       else str(p): file_hash(p)
                       for p in inputs if Path(p).is_file()},
            "outputs": [],
            "completed": False,
        }
        self._write_manifest(manifest)

    def finish_stage(self, stage: str, outputs: list[str | Path]) -> None:
        manifest = self._read_manifest()
        if stage not in manifest["stages"]:
            raise RuntimeError(f"stage {stage!r} was never started")
        rel = []
        for p in outputs:
            p = Path(p)
            if not p.is_file():
                raise RuntimeError(f"stage {stage!r} claims missing output {p}")
            rel.append(str(p.relative_to(self.root)))
        manifest["stages"][stage]["outputs"] = sorted(rel)
        manifest["stages"][stage]["completed"] = True
        self._write_manifest(manifest)

    def stage_outputs(self, stage: str) -> list[Path]:
        manifest = self._read_manifest()
        info = manifest["stages"].get(stage)
        if info is None:
            return []
        return [self.root / p for p in info["outputs"]]

    def listed_outputs(self) -> set[str]:
        manifest = self._read_manifest()
        out: set[str] = set()
        for info in manifest["stages"].values():
            out.update(info["outputs"])
        return out
