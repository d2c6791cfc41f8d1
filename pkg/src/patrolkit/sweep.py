"""Parameter sweeps: cartesian products of simulation settings with resumable per-cell output."""

from __future__ import annotations

import csv
import json
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

from .analysis import summarize
from .sim import ConfigError, SimConfig, run, save_run

RESULT_COLUMNS = ("map", "strategy", "team_size", "msg_fail_prob", "run", "seed", "mean_idleness",
                  "mean_max_idleness", "path")
DONE = "summary.json"


@dataclass
class SweepSpec:
    maps: list[str] = field(default_factory=lambda: ["map40"])
    strategies: list[str] = field(default_factory=lambda: ["sebs"])
    team_sizes: list[int] = field(default_factory=lambda: [1, 2, 4, 6, 8, 12])
    msg_fail_probs: list[float] = field(default_factory=lambda: [0.0])
    runs_per_cell: int = 5
    duration: float = 3600.0
    base_seed: int = 0
    weights: dict[str, str] = field(default_factory=dict)
    agent_speed: float = 1.0

    @classmethod
    def from_dict(cls, data: dict) -> SweepSpec:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sweep fields: {sorted(unknown)}")
        spec = cls(**data)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> SweepSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        for name in ("maps", "strategies", "team_sizes", "msg_fail_probs"):
            if not getattr(self, name):
                raise ConfigError(f"sweep field {name!r} is empty")
        if self.runs_per_cell < 1:
            raise ConfigError("runs_per_cell must be at least 1")
        for s in self.strategies:
            if s in ("suns", "mns") and s not in self.weights:
                raise ConfigError(f"strategy {s!r} needs an entry in 'weights'")

    def cells(self) -> list[dict]:
        out = []
        for m, s, n, pf, r in product(self.maps, self.strategies, self.team_sizes, self.msg_fail_probs,
                                      range(self.runs_per_cell)):
            out.append({"map": m, "strategy": s, "team_size": int(n), "msg_fail_prob": float(pf), "run": r,
                        "seed": cell_seed(self.base_seed, m, n, r)})
        return out


def cell_seed(base_seed: int, map_name: str, team_size: int, run_index: int) -> int:
    """Seed from a stable hash of the scenario coordinates.

    Strategy and failure probability are left out, so every strategy and
    every p(f) of a scenario replays the same start positions; adding cells
    never changes existing seeds.
    """
    key = f"{map_name}|{int(team_size)}|{int(run_index)}".encode()
    return int(base_seed) + zlib.crc32(key) % (2 ** 31)


def cell_dir(root: Path, cell: dict) -> Path:
    name = Path(cell["map"]).stem
    return root / "cells" / name / cell["strategy"] / f"n{cell['team_size']}" / f"pf{cell['msg_fail_prob']:g}" / f"run{cell['run']}"


def _run_cell(args) -> dict:
    spec, cell, directory = args
    directory = Path(directory)
    done = directory / DONE
    if done.is_file():
        return json.loads(done.read_text())
    config = SimConfig(map=cell["map"], strategy=cell["strategy"], weights=spec.weights.get(cell["strategy"]),
                       n_agents=cell["team_size"], duration=spec.duration, agent_speed=spec.agent_speed,
                       msg_fail_prob=cell["msg_fail_prob"], seed=cell["seed"])
    log = run(config)
    from .bundled import resolve_map

    save_run(log, config, resolve_map(cell["map"]), directory)
    s = summarize(log)
    row = dict(cell, mean_idleness=s.mean_idleness, mean_max_idleness=s.mean_max_idleness, path=str(directory))
    done.write_text(json.dumps(row, indent=1, sort_keys=True) + "\n")   # written last: marks the cell complete
    return row


def run_sweep(spec: SweepSpec, out, jobs: int = 1) -> list[dict]:
    """Run every cell not already completed under ``out`` and write ``results.csv``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
    tasks = [(spec, c, str(cell_dir(out, c))) for c in spec.cells()]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_run_cell, tasks))
    else:
        rows = [_run_cell(t) for t in tasks]
    with open(out / "results.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in RESULT_COLUMNS})
    return rows
