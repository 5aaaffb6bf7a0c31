"""Run manifest: which phase wrote which artifact, with content hashes.

The manifest is bookkeeping, not an artifact: it carries wall-clock timings
and may differ between reruns. The artifacts it points to are byte-identical
for identical configs and seeds, and verification recomputes their hashes.
"""
from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

MANIFEST_NAME = "manifest.json"


class IntegrityError(RuntimeError):
    """An artifact is missing or its content no longer matches the manifest."""


class MissingPrerequisiteError(RuntimeError):
    """A phase was invoked before the phase that produces its inputs."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_manifest(out_dir) -> dict:
    path = Path(out_dir) / MANIFEST_NAME
    if not path.is_file():
        return {"config_hash": None, "phases": {}}
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"corrupt manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or "phases" not in doc:
        raise IntegrityError(f"corrupt manifest {path}: missing 'phases'")
    return doc


def save_manifest(out_dir, doc: dict) -> None:
    path = Path(out_dir) / MANIFEST_NAME
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


def record_phase(
    out_dir, phase: str, config_hash: str, artifacts: dict[str, Path],
    info: dict | None = None, wall_seconds: float | None = None,
    reads: list[str] | None = None,
) -> None:
    doc = load_manifest(out_dir)
    doc["config_hash"] = config_hash
    doc["phases"][phase] = {
        "artifacts": {
            name: {"path": str(path), "sha256": sha256_file(path),
                   "bytes": Path(path).stat().st_size}
            for name, path in artifacts.items()
        },
        "reads": reads or [],
        "info": info or {},
        "wall_seconds": wall_seconds,
        "recorded_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    save_manifest(out_dir, doc)


def require_artifact(out_dir, phase: str, name: str) -> Path:
    """Path of an artifact a prior phase must have produced, hash-verified."""
    doc = load_manifest(out_dir)
    entry = doc["phases"].get(phase)
    if entry is None or name not in entry.get("artifacts", {}):
        raise MissingPrerequisiteError(
            f"missing prerequisite: run phase '{phase}' first (artifact '{name}' not recorded)"
        )
    meta = entry["artifacts"][name]
    path = Path(meta["path"])
    if not path.is_file():
        raise IntegrityError(f"artifact '{name}' from phase '{phase}' vanished: {path}")
    actual = sha256_file(path)
    if actual != meta["sha256"]:
        raise IntegrityError(
            f"stale artifact: '{name}' from phase '{phase}' has hash {actual[:12]}..., "
            f"manifest records {meta['sha256'][:12]}..."
        )
    return path


def verify_manifest(out_dir) -> list[str]:
    """Recheck every recorded artifact; return a list of problems (empty = ok)."""
    doc = load_manifest(out_dir)
    problems = []
    for phase, entry in doc["phases"].items():
        for name, meta in entry.get("artifacts", {}).items():
            path = Path(meta["path"])
            if not path.is_file():
                problems.append(f"{phase}/{name}: missing file {path}")
            elif sha256_file(path) != meta["sha256"]:
                problems.append(f"{phase}/{name}: content hash mismatch")
    return problems
