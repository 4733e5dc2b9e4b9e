"""Artifact plumbing: atomic writes, content digests and run manifests."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

from layerqe import __version__
from layerqe.errors import DataFormatError

_logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def atomic_write(dest: Path, write: Callable[[Path], None], *, suffix: str = ".tmp") -> Path:
    """Write ``dest`` through a temp file in the same directory, then replace.

    ``write`` receives the temporary path and must create the file there. On
    failure the temp file is removed and ``dest`` is left untouched.
    """
    dest = Path(dest).resolve()
    dest.parent.mkdir(parents=True, exist_ok=True)

    fd, tmp_name = tempfile.mkstemp(prefix=dest.name + ".", suffix=suffix, dir=str(dest.parent))
    os.close(fd)
    tmp_path = Path(tmp_name)
    try:
        write(tmp_path)
        tmp_path.replace(dest)  # atomic on same filesystem
        return dest
    finally:
        if tmp_path.exists():
            try:
                tmp_path.unlink()
            except OSError:
                pass


def atomic_write_bytes(dest: Path, data: bytes) -> Path:
    return atomic_write(dest, lambda tmp: tmp.write_bytes(data))


def atomic_write_text(dest: Path, text: str) -> Path:
    return atomic_write(dest, lambda tmp: tmp.write_text(text, encoding="utf-8", newline=""))


def atomic_write_json(dest: Path, payload: Any) -> Path:
    return atomic_write_text(dest, json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=False) + "\n")


def sha256_file(path: Path, chunk_size: int = 1024 * 1024) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        while True:
            chunk = f.read(chunk_size)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


def git_describe(cwd: Optional[Path] = None) -> str:
    """``git describe --always --dirty`` of the source tree, or ``"unknown"``."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=str(cwd or Path(__file__).resolve().parent),
            capture_output=True,
            text=True,
            timeout=5,
            check=False,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


@dataclass
class RunManifest:
    """Everything needed to rerun a command and check it reproduced."""

    command: str
    argv: List[str]
    config: Dict[str, Any]
    seed: Optional[int]
    version: str = __version__
    build: str = field(default_factory=git_describe)
    inputs: Dict[str, str] = field(default_factory=dict)  # path -> sha256
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))
    timings: Dict[str, float] = field(default_factory=dict)

    def record_inputs(self, paths: Sequence[Optional[Path]]) -> None:
        for p in paths:
            if p is not None and Path(p).is_file():
                self.inputs[str(p)] = sha256_file(Path(p))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunManifest":
        try:
            return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})
        except TypeError as exc:
            raise DataFormatError(f"invalid run manifest: {exc}") from exc

    def write(self, out_dir: Path) -> Path:
        return atomic_write_json(Path(out_dir) / MANIFEST_NAME, self.to_dict())


def read_manifest(path: Path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read run manifest: {exc}", path=path) from exc
    return RunManifest.from_dict(data)


class Stopwatch:
    """Collects named wall-clock timings into a manifest."""

    def __init__(self, sink: Dict[str, float]):
        self._sink = sink

    def time(self, name: str) -> "_Lap":
        return _Lap(self._sink, name)


class _Lap:
    def __init__(self, sink: Dict[str, float], name: str):
        self._sink = sink
        self._name = name
        self._start = 0.0

    def __enter__(self) -> "_Lap":
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc: object) -> None:
        elapsed = time.perf_counter() - self._start
        self._sink[self._name] = round(self._sink.get(self._name, 0.0) + elapsed, 6)
        _logger.debug("%s took %.3fs", self._name, elapsed)
