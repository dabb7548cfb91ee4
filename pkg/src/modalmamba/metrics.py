"""Per-step training metrics: in-memory log plus CSV/JSON persistence.

CSV layout (one row per modality per step):
    step, modality, loss, total_loss, cum_flops, seconds
A modality absent from a step writes an empty loss field. The `seconds`
column is 0.0 unless the run recorded timing, keeping the file byte-stable
across identical runs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

from .model import ConfigError


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class StepRow:
    step: int
    losses: dict[str, Optional[float]]
    total: float
    cum_flops: int
    seconds: float = 0.0


@dataclass
class MetricsLog:
    metadata: dict
    rows: list[StepRow] = field(default_factory=list)

    def __post_init__(self) -> None:
        steps = [r.step for r in self.rows]
        if steps != sorted(set(steps)):
            raise ConfigError("metrics rows must have strictly increasing steps")

    @property
    def modalities(self) -> list[str]:
        return list(self.metadata.get("modalities", []))

    def append(self, row: StepRow) -> None:
        if self.rows:
            if row.step <= self.rows[-1].step:
                raise ConfigError(
                    f"steps must increase: {row.step} after {self.rows[-1].step}")
            if row.cum_flops < self.rows[-1].cum_flops:
                raise ConfigError("cumulative FLOPs must be nondecreasing")
        self.rows.append(row)

    def curve(self, modality: Optional[str] = None,
              x_axis: str = "step") -> tuple[list[float], list[float]]:
        """(x, loss) points for one modality, or the total when None."""
        xs, ys = [], []
        for r in self.rows:
            y = r.total if modality is None else r.losses.get(modality)
            if y is None:
                continue
            xs.append(float(r.step) if x_axis == "step" else float(r.cum_flops))
            ys.append(float(y))
        return xs, ys

    def final_losses(self) -> dict[str, Optional[float]]:
        return dict(self.rows[-1].losses) if self.rows else {}

    # -- persistence ---------------------------------------------------------

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fp:
            w = csv.writer(fp)
            w.writerow(["step", "modality", "loss", "total_loss", "cum_flops", "seconds"])
            for r in self.rows:
                for name in self.modalities:
                    loss = r.losses.get(name)
                    w.writerow([r.step, name,
                                "" if loss is None else _fmt(loss),
                                _fmt(r.total), r.cum_flops, _fmt(r.seconds)])

    def write_json(self, path) -> None:
        doc = {"metadata": self.metadata,
               "rows": [{"step": r.step, "losses": r.losses, "total": r.total,
                         "cum_flops": r.cum_flops, "seconds": r.seconds}
                        for r in self.rows]}
        with open(path, "w") as fp:
            json.dump(doc, fp, indent=1)
            fp.write("\n")


def read_metrics_json(path) -> MetricsLog:
    with open(path) as fp:
        doc = json.load(fp)
    log = MetricsLog(metadata=doc["metadata"])
    for r in doc["rows"]:
        log.append(StepRow(step=int(r["step"]), losses=r["losses"],
                           total=float(r["total"]), cum_flops=int(r["cum_flops"]),
                           seconds=float(r["seconds"])))
    return log


def read_metrics_csv(path, metadata: Optional[dict] = None) -> MetricsLog:
    rows: dict[int, StepRow] = {}
    order: list[str] = []
    with open(path, newline="") as fp:
        reader = csv.DictReader(fp)
        expected = ["step", "modality", "loss", "total_loss", "cum_flops", "seconds"]
        if reader.fieldnames != expected:
            raise ConfigError(f"unexpected metrics header {reader.fieldnames}, want {expected}")
        for rec in reader:
            step = int(rec["step"])
            row = rows.setdefault(step, StepRow(
                step=step, losses={}, total=float(rec["total_loss"]),
                cum_flops=int(rec["cum_flops"]), seconds=float(rec["seconds"])))
            name = rec["modality"]
            row.losses[name] = float(rec["loss"]) if rec["loss"] else None
            if name not in order:
                order.append(name)
    meta = dict(metadata or {})
    meta.setdefault("modalities", order)
    log = MetricsLog(metadata=meta)
    for step in sorted(rows):
        log.append(rows[step])
    return log
