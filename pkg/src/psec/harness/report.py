"""Run reports: JSON with a content hash that ignores timing."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA = "psec-report/1"
VOLATILE = ("wall_time",)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def atomic_write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv(path: str | Path, header: list[str], rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return atomic_write_text(path, buf.getvalue())


@dataclass
class RunReport:
    command: str
    config: dict
    phases: dict[str, list[float]] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    library: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0

    def body(self) -> dict:
        return {
            "schema": SCHEMA,
            "command": self.command,
            "config": self.config,
            "phases": {k: [float(x) for x in v] for k, v in self.phases.items()},
            "metrics": self.metrics,
            "library": self.library,
            "outputs": self.outputs,
        }

    @property
    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.body()).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {**self.body(), "wall_time": self.wall_time, "hash": self.hash}

    def write(self, path: str | Path) -> Path:
        return atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def report_hash(d: dict) -> str:
    """Recompute a report's hash from its JSON form."""
    body = {k: v for k, v in d.items() if k not in VOLATILE and k != "hash"}
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()
