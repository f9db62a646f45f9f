"""Run manifests: config snapshot, per-epoch metrics, analysis outputs, hashes."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

SCHEMA_VERSION = 1

# per-epoch CSV columns for each command; pinned by golden tests
EPOCH_COLUMNS = {
    "supervised": ["epoch", "lr", "goal", "total", "train_error", "test_error", "test_loss"],
    "distill": ["epoch", "lr", "goal", "inh", "exp", "total", "train_error", "test_error", "test_loss"],
    "iedml": [
        "epoch", "lr",
        "goal1", "rec1", "inh1", "exp1", "total1", "test_error1",
        "goal2", "rec2", "inh2", "exp2", "total2", "test_error2",
        "hash_checks",
    ],
    "codec": ["epoch", "lr", "rec"],
    # single-shot commands: results live in ``analysis``
    "ablation": [],
    "analysis": [],
    "gradcheck": [],
}

SUMMARY_COLUMNS = ["cell", "eta", "metric", "lambda_inh", "lambda_exp", "seed", "test_error", "test_loss", "metrics_hash"]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class RunManifest:
    command: str
    kind: str
    config: dict
    dataset: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)
    analysis: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)  # name -> sha256 of parameter state
    artifacts: dict = field(default_factory=dict)  # file name -> sha256
    wall_clock: float = 0.0
    schema_version: int = SCHEMA_VERSION

    def log_epoch(self, row: dict) -> None:
        missing = set(EPOCH_COLUMNS[self.kind]) - set(row)
        if missing:
            raise KeyError(f"epoch row missing {sorted(missing)}")
        self.epochs.append({k: row[k] for k in EPOCH_COLUMNS[self.kind]})

    def metrics_hash(self) -> str:
        """sha256 over everything a replay must reproduce (excludes wall clock and file hashes)."""
        payload = {"epochs": self.epochs, "analysis": self.analysis, "params": self.params}
        return hashlib.sha256(canonical_json(payload).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "command": self.command,
            "kind": self.kind,
            "config": self.config,
            "dataset": self.dataset,
            "epochs": self.epochs,
            "analysis": self.analysis,
            "params": self.params,
            "artifacts": self.artifacts,
            "wall_clock": self.wall_clock,
            "metrics_hash": self.metrics_hash(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(
            command=d["command"],
            kind=d["kind"],
            config=d["config"],
            dataset=d.get("dataset", {}),
            epochs=d.get("epochs", []),
            analysis=d.get("analysis", {}),
            params=d.get("params", {}),
            artifacts=d.get("artifacts", {}),
            wall_clock=d.get("wall_clock", 0.0),
            schema_version=d.get("schema_version", SCHEMA_VERSION),
        )

    def write(self, directory, stem: str = "manifest") -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_epoch_csv(d / f"{stem}_epochs.csv", self.kind, self.epochs)
        path = d / f"{stem}.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def read_manifest(path) -> RunManifest:
    return RunManifest.from_dict(json.loads(Path(path).read_text()))


def write_epoch_csv(path, kind: str, rows: list) -> None:
    cols = EPOCH_COLUMNS[kind]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_summary_csv(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in SUMMARY_COLUMNS})


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def verify(stored: RunManifest, replayed: RunManifest) -> Optional[str]:
    """``None`` if the replay matches; otherwise a short description of the first difference."""
    if stored.metrics_hash() == replayed.metrics_hash():
        return None
    for i, (a, b) in enumerate(zip(stored.epochs, replayed.epochs)):
        if a != b:
            return f"epoch {i} differs: {a} != {b}"
    if len(stored.epochs) != len(replayed.epochs):
        return "epoch count differs"
    for k in sorted(set(stored.params) | set(replayed.params)):
        if stored.params.get(k) != replayed.params.get(k):
            return f"parameter hash {k} differs"
    return "analysis outputs differ"
