"""Run manifest: config hash, tool version and per-stage content hashes."""
from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path
from typing import Iterable

from . import __version__

MANIFEST_NAME = "manifest.json"


class StageDependencyError(RuntimeError):
    pass


class StaleArtifactError(RuntimeError):
    pass


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_files(paths: Iterable[Path], root: Path | None = None) -> str:
    """Order-independent digest over file names (relative to ``root``) and contents."""
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        name = str(p.relative_to(root)) if root else p.name
        h.update(name.encode())
        h.update(b"\0")
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def hash_tree(directory: Path) -> str:
    directory = Path(directory)
    return hash_files([p for p in directory.rglob("*") if p.is_file()], root=directory)


def hash_outcome_log(path: Path, volatile: Iterable[str] = ("wall_time",)) -> str:
    """Digest of an outcome log with timing fields removed, so reruns compare equal."""
    volatile = tuple(volatile)
    h = hashlib.sha256()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        for key in volatile:
            rec.pop(key, None)
        h.update(json.dumps(rec, sort_keys=True, separators=(",", ":")).encode())
        h.update(b"\n")
    return h.hexdigest()


class Manifest:
    """``manifest.json`` in the run directory; one entry per stage (and per denoiser)."""

    def __init__(self, directory):
        self.path = Path(directory) / MANIFEST_NAME
        if self.path.exists():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))
        else:
            self.data = {"version": __version__, "config_hash": None, "stages": {}}

    def stage(self, name: str) -> dict | None:
        return self.data["stages"].get(name)

    def require(self, name: str, what: str) -> dict:
        entry = self.stage(name)
        if entry is None:
            raise StageDependencyError(f"{what} needs the '{name}' stage; run it first")
        return entry

    def check_fresh(self, name: str, config_hash: str, force: bool) -> None:
        """Refuse to overwrite a stage produced under a different config unless forced."""
        entry = self.stage(name)
        if entry is None or entry.get("config_hash") == config_hash:
            return
        if not force:
            raise StaleArtifactError(
                f"stage '{name}' was produced with config {entry.get('config_hash', '?')[:12]}, "
                f"current config is {config_hash[:12]}; pass --force to overwrite")

    def check_upstream(self, name: str, upstream: dict[str, str], force: bool) -> None:
        """Flag a stage whose recorded inputs no longer match the current upstream artifacts."""
        entry = self.stage(name)
        if entry is None or force:
            return
        old = entry.get("upstream", {})
        changed = [k for k, v in upstream.items() if k in old and old[k] != v]
        if changed:
            raise StaleArtifactError(f"stage '{name}' is stale: upstream {changed} changed; pass --force")

    def record(self, name: str, config_hash: str, content_hash: str, upstream: dict[str, str] | None = None,
               **extra) -> dict:
        entry = {
            "config_hash": config_hash,
            "hash": content_hash,
            "upstream": dict(upstream or {}),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            **extra,
        }
        self.data["stages"][name] = entry
        self.data["config_hash"] = config_hash
        self.data["version"] = __version__
        self.save()
        return entry

    def hash_of(self, name: str) -> str | None:
        entry = self.stage(name)
        return entry["hash"] if entry else None

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
