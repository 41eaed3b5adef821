"""Run directories: one manifest per run plus CSV helpers."""

from __future__ import annotations

import csv
import json
import math
import os
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from claifo import __version__

RUNS_DIR_ENV = "CLAIFO_RUNS_DIR"
MANIFEST = "manifest.json"


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_DIR_ENV, "runs"))


def resolve_out(out: str | os.PathLike) -> Path:
    """Relative output paths land under ``$CLAIFO_RUNS_DIR`` when it is set."""
    p = Path(out)
    if not p.is_absolute() and RUNS_DIR_ENV in os.environ:
        p = runs_root() / p
    return p


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    run_id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])
    version: str = __version__
    started: str = field(default_factory=_now)
    finished: str | None = None
    artifacts: dict[str, str] = field(default_factory=dict)

    def write(self, run_dir: Path):
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / MANIFEST).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    def finish(self, run_dir: Path, **artifacts: str):
        self.artifacts.update(artifacts)
        self.finished = _now()
        self.write(run_dir)

    @classmethod
    def read(cls, run_dir: Path) -> RunManifest:
        return cls(**json.loads((Path(run_dir) / MANIFEST).read_text()))


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class CsvLog:
    """Append-only CSV with a fixed header; floats written with full precision."""

    def __init__(self, path: Path, columns: list[str]):
        self.path = Path(path)
        self.columns = list(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerow(self.columns)

    def write(self, row: dict):
        missing = set(row) - set(self.columns)
        if missing:
            raise KeyError(f"unknown columns {sorted(missing)}")
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([_fmt(row.get(c)) for c in self.columns])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
