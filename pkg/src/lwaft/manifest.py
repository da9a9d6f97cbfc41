"""Run manifests: what a command read, what it wrote, and their hashes."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import FormatError

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    run_id: str
    command: str
    config: dict
    seeds: dict
    tool_version: str
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    status: str = "running"
    failed_stage: str | None = None
    manifest_version: int = MANIFEST_VERSION

    def add_input(self, path) -> str:
        digest = file_sha256(path)
        self.inputs[str(Path(path).resolve())] = digest
        return digest

    def record_outputs(self, run_dir: Path) -> None:
        """Hash every file under ``run_dir`` except the manifest itself."""
        self.outputs = {
            str(p.relative_to(run_dir)): file_sha256(p)
            for p in sorted(run_dir.rglob("*"))
            if p.is_file() and p.name != MANIFEST_NAME and not _nested_run(p, run_dir)
        }

    def write(self, run_dir: Path) -> Path:
        path = Path(run_dir) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, run_dir) -> RunManifest:
        path = Path(run_dir) / MANIFEST_NAME
        if not path.is_file():
            raise FormatError(f"no {MANIFEST_NAME} in {run_dir}")
        try:
            data = json.loads(path.read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed manifest {path}: {exc}") from None
        if data.get("manifest_version") != MANIFEST_VERSION:
            raise FormatError(
                f"manifest version {data.get('manifest_version')} in {run_dir} does not match {MANIFEST_VERSION}"
            )
        return cls(**data)


def _nested_run(path: Path, run_dir: Path) -> bool:
    # files that belong to a sub-run are covered by that sub-run's manifest
    for parent in path.parents:
        if parent == run_dir:
            return False
        if (parent / MANIFEST_NAME).is_file():
            return True
    return False


def verify(run_dir) -> list[str]:
    """Recompute every recorded hash; returns a list of mismatch messages."""
    run_dir = Path(run_dir)
    man = RunManifest.read(run_dir)
    problems = []
    for rel, digest in man.outputs.items():
        p = run_dir / rel
        if not p.is_file():
            problems.append(f"missing output {rel}")
        elif file_sha256(p) != digest:
            problems.append(f"output changed: {rel}")
    for src, digest in man.inputs.items():
        p = Path(src)
        if not p.is_file():
            problems.append(f"missing input {src}")
        elif file_sha256(p) != digest:
            problems.append(f"input changed: {src}")
    return problems
