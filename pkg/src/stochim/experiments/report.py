"""Run reports: a JSON document plus one CSV per table.

Schema of ``report.json``::

    experiment    tag of the study
    config        echo of every configuration key
    criteria      list of {id, criterion, name, value, threshold, passed}
    aggregate     study-level statistics
    passed        true iff every criterion passed
    wall_clock    seconds
    artifacts     file names written next to the report
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    return v


@dataclass
class RunReport:
    config: ExperimentConfig
    criteria: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    artifacts: list = field(default_factory=list)
    _t0: float = 0.0

    @classmethod
    def start(cls, cfg: ExperimentConfig) -> "RunReport":
        return cls(cfg, _t0=time.perf_counter())

    def finish(self) -> None:
        self.wall_clock = time.perf_counter() - self._t0

    def check(self, cid: str, criterion: int, name: str, value, passed: bool, threshold: str):
        self.criteria.append({
            "id": cid, "criterion": criterion, "name": name, "value": value,
            "threshold": threshold, "passed": bool(passed),
        })

    def table(self, name: str, rows: list) -> None:
        self.tables[name] = rows

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.criteria)

    def criterion(self, cid: str) -> dict:
        for c in self.criteria:
            if c["id"] == cid:
                return c
        raise KeyError(cid)

    def as_dict(self) -> dict:
        return _clean({
            "experiment": self.config.experiment,
            "config": asdict(self.config),
            "criteria": self.criteria,
            "aggregate": self.aggregate,
            "passed": self.passed,
            "wall_clock": self.wall_clock,
            "artifacts": self.artifacts,
        })

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.artifacts = []
        for name, rows in self.tables.items():
            fname = name if name.startswith(self.config.experiment) else f"{self.config.experiment}_{name.split('_', 1)[-1]}"
            path = out / f"{fname}.csv"
            _write_rows(path, rows)
            self.artifacts.append(path.name)
        dest = out / "report.json"
        dest.write_text(json.dumps(self.as_dict(), indent=2))
        return dest


def _write_rows(path: Path, rows: list) -> None:
    keys: list = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([_cell(r.get(k, "")) for k in keys])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if v is None:
        return ""
    return v
