"""Log MMLU error against log model size, from bundled benchmark values."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path


@dataclass(frozen=True)
class BenchEntry:
    model_name: str
    param_count: int
    mmlu: float

    def __post_init__(self):
        if self.param_count <= 0:
            raise ValueError(f"{self.model_name}: param_count must be positive")
        if not 0 < self.mmlu < 100:
            raise ValueError(f"{self.model_name}: mmlu must lie in (0, 100), got {self.mmlu}")


@dataclass(frozen=True)
class ScalingPoint:
    model_name: str
    ln_size: float
    ln_error: float


def scaling_points(entries: list[BenchEntry]) -> list[ScalingPoint]:
    return [ScalingPoint(e.model_name, math.log(e.param_count), math.log(100.0 - e.mmlu)) for e in entries]


def load_bench(path: str | Path | None = None) -> list[BenchEntry]:
    if path is None:
        text = (resources.files("phi3lab") / "data" / "bench.json").read_text()
    else:
        text = Path(path).read_text()
    return [BenchEntry(r["model_name"], int(r["param_count"]), float(r["mmlu"])) for r in json.loads(text)]
