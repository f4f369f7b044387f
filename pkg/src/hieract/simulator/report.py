"""Benchmark outputs: report.json, metrics.csv, curves.csv, and their aggregation.

A simulate config is a mapping of :class:`RunConfig` fields plus two optional
keys: ``seeds`` (list of ints, overrides ``seed``) and ``variants`` (mapping
of run id to field overrides).  Every (variant, seed) cell is one run.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml

from ..errors import DataError, ParseFailure
from .loop import RunConfig, RunReport, run_active_learning


@dataclass(frozen=True)
class SimulatePlan:
    cells: tuple[RunConfig, ...]


def load_config_file(path: str | Path) -> dict[str, Any]:
    """YAML or JSON mapping (JSON is a subset of YAML)."""
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ParseFailure(f"{path}: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise DataError(f"{path}: config must be a mapping")
    return doc


def plan_from_dict(doc: dict[str, Any], seed: int | None = None) -> SimulatePlan:
    doc = dict(doc)
    seeds = doc.pop("seeds", None)
    variants = doc.pop("variants", None) or {"": {}}
    if seed is not None:
        seeds = [seed]
    if seeds is None:
        seeds = [doc.get("seed", RunConfig.seed)]
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise DataError("seeds must be a list of integers")
    if not isinstance(variants, dict):
        raise DataError("variants must map run ids to field overrides")
    cells = []
    for name, overrides in variants.items():
        if not isinstance(overrides, dict):
            raise DataError(f"variant {name!r}: overrides must be a mapping")
        for s in seeds:
            fields = {**doc, **overrides, "seed": s}
            if name:
                fields["run_id"] = name
            cells.append(RunConfig.from_dict(fields))
    return SimulatePlan(tuple(cells))


def run_plan(plan: SimulatePlan) -> list[RunReport]:
    return [run_active_learning(cfg) for cfg in plan.cells]


def metrics_rows(reports: Sequence[RunReport]) -> tuple[list[str], list[list[Any]]]:
    names = reports[0].class_names if reports else []
    header = ["run_id", "seed", "round", "miou"] + [f"iou_{n}" for n in names]
    rows = []
    for rep in reports:
        for r in rep.rounds:
            cls = ["" if v is None else repr(float(v)) for v in r.per_class_iou]
            rows.append([rep.run_id, rep.seed, r.round, repr(float(r.miou))] + cls)
    return header, rows


def curve_rows(reports: Sequence[RunReport]) -> tuple[list[str], list[list[Any]]]:
    """Mean and spread of mIoU per (run id, round) across seeds."""
    groups: dict[tuple[str, int], list[tuple[float, int]]] = defaultdict(list)
    for rep in reports:
        for r in rep.rounds:
            groups[(rep.run_id, r.round)].append((r.miou, r.labeled_total))
    header = ["run_id", "round", "labeled_mean", "miou_mean", "miou_std", "num_seeds"]
    rows = []
    for (run_id, rnd), vals in sorted(groups.items()):
        m = np.array([v[0] for v in vals])
        lab = np.array([v[1] for v in vals], dtype=np.float64)
        rows.append([run_id, rnd, repr(float(lab.mean())), repr(float(m.mean())),
                     repr(float(m.std())), len(vals)])
    return header, rows


def _write_csv(path: Path, header: list[str], rows: Iterable[list[Any]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_outputs(reports: Sequence[RunReport], out_dir: str | Path) -> list[Path]:
    """Write the three benchmark files; their bytes depend only on the reports' content."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"runs": [r.to_json() for r in reports]}
    paths = [out / "report.json", out / "metrics.csv", out / "curves.csv"]
    paths[0].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_csv(paths[1], *metrics_rows(reports))
    _write_csv(paths[2], *curve_rows(reports))
    return paths


# -- aggregation -----------------------------------------------------------


@dataclass(frozen=True)
class VariantSummary:
    run_id: str
    seeds: tuple[int, ...]
    final_miou: tuple[float, ...]  # per seed, in seed order
    mean: float
    std: float


def read_metrics(paths: Sequence[str | Path]) -> dict[str, dict[int, float]]:
    """Final-round mIoU per run id and seed from one or more metrics.csv files."""
    last: dict[tuple[str, int], tuple[int, float]] = {}
    for p in paths:
        with Path(p).open(newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            missing = {"run_id", "seed", "round", "miou"} - set(reader.fieldnames or [])
            if missing:
                raise DataError(f"{p}: missing column(s) {', '.join(sorted(missing))}")
            for row in reader:
                try:
                    key = (row["run_id"], int(row["seed"]))
                    rnd, miou = int(row["round"]), float(row["miou"])
                except ValueError as exc:
                    raise DataError(f"{p}: bad row {row}: {exc}") from exc
                if key not in last or rnd > last[key][0]:
                    last[key] = (rnd, miou)
    out: dict[str, dict[int, float]] = defaultdict(dict)
    for (run_id, seed), (_, miou) in last.items():
        out[run_id][seed] = miou
    return dict(out)


def summarize(final: dict[str, dict[int, float]]) -> list[VariantSummary]:
    rows = []
    for run_id in sorted(final):
        seeds = tuple(sorted(final[run_id]))
        vals = np.array([final[run_id][s] for s in seeds])
        rows.append(VariantSummary(run_id, seeds, tuple(vals.tolist()), float(vals.mean()), float(vals.std())))
    return rows


def comparison_table(final: dict[str, dict[int, float]], reference: str = "full",
                     baseline: str = "random") -> str:
    """Plain-text table of final mIoU per variant, with deltas against ``reference``."""
    rows = summarize(final)
    ref = next((r for r in rows if r.run_id == reference), None)
    lines = [f"{'run_id':<14}{'seeds':>6}{'mean mIoU':>11}{'std':>8}{'delta':>9}"]
    for r in sorted(rows, key=lambda r: -r.mean):
        delta = f"{100 * (r.mean - ref.mean):+.2f}" if ref else ""
        lines.append(f"{r.run_id:<14}{len(r.seeds):>6}{100 * r.mean:>11.2f}{100 * r.std:>8.2f}{delta:>9}")
    if ref and baseline in final:
        common = sorted(set(final[reference]) & set(final[baseline]))
        wins = sum(final[reference][s] - final[baseline][s] >= 0.02 for s in common)
        lines.append(f"{reference} beats {baseline} by >= 2 mIoU points on {wins}/{len(common)} seeds")
    return "\n".join(lines) + "\n"
