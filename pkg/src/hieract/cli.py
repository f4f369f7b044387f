"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3
external-service error.  Every failure writes one JSON object on a single
line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from itertools import islice
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from . import __version__
from .errors import DataError, HieractError, ParseFailure, ServiceError
from .hierarchy import LabelHierarchy, balance_metrics, dumps_hierarchy
from .selection import SelectionConfig, budget_from_fraction, multi_scale_select
from .uncertainty import GlobalProfile, label_uncertainty, normalize_levels, propagate_batch

log = logging.getLogger("hieract")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SERVICE = 0, 1, 2, 3
CHUNK = 4096


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


# -- shared helpers --------------------------------------------------------


def _hierarchy(ref: str) -> LabelHierarchy:
    from .simulator.loop import resolve_hierarchy

    return resolve_hierarchy(ref)


def _jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseFailure(f"{path}:{lineno}: {exc.msg}") from exc
            if not isinstance(rec, dict):
                raise ParseFailure(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


def _chunks(it: Iterator, size: int = CHUNK) -> Iterator[list]:
    while True:
        block = list(islice(it, size))
        if not block:
            return
        yield block


def _read_ids(path: str | None) -> set[int]:
    """Ids from a JSON list, a ``{"selected": [...]}`` document, or one id per line."""
    if not path:
        return set()
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text:
        return set()
    try:
        doc = json.loads(text)
        if isinstance(doc, dict):
            doc = doc.get("selected", doc.get("ids"))
        if isinstance(doc, int):
            doc = [doc]
        if not isinstance(doc, list):
            raise ValueError
        return {int(i) for i in doc}
    except ValueError:
        try:
            return {int(line) for line in text.splitlines() if line.strip()}
        except ValueError as exc:
            raise ParseFailure(f"{path}: cannot read point ids") from exc


def _record_levels(path, lineno: int, rec: dict, h: LabelHierarchy) -> list:
    levels = rec.get("levels")
    if not isinstance(levels, list) or len(levels) != h.num_levels:
        raise DataError(f"{path}:{lineno}: 'levels' must hold {h.num_levels} probability vectors")
    return levels


def _levels_block(path, block, h: LabelHierarchy) -> list[np.ndarray]:
    rows = [_record_levels(path, n, rec, h) for n, rec in block]
    try:
        per_level = [np.array([r[i] for r in rows], dtype=np.float64) for i in range(h.num_levels)]
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: ragged or non-numeric 'levels' near line {block[0][0]}") from exc
    return normalize_levels(h, per_level)


def _record_id(path, lineno: int, rec: dict) -> int:
    pid = rec.get("id")
    if not isinstance(pid, int) or isinstance(pid, bool):
        raise DataError(f"{path}:{lineno}: 'id' must be an integer")
    return pid


def _emit(obj: Any) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


# -- hierarchy -------------------------------------------------------------


def cmd_hierarchy_generate(args) -> int:
    from .llm_taxonomy import EndpointConfig, FixtureClient, HttpTaxonomyClient, refine_loop

    labels = [ln.strip() for ln in Path(args.labels).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if args.offline:
        client = FixtureClient(args.offline)
    else:
        client = HttpTaxonomyClient(EndpointConfig.from_env(model=args.model))
    res = refine_loop(labels, args.depth, args.max_iterations, client, args.balance_bound)
    Path(args.out).write_text(dumps_hierarchy(res.hierarchy), encoding="utf-8")
    _emit({"out": str(args.out), "iterations": res.iterations,
           "level_sizes": list(res.hierarchy.level_sizes)})
    return EXIT_OK


def cmd_hierarchy_validate(args) -> int:
    h = _hierarchy(args.file)
    rep = balance_metrics(h)
    _emit({
        "valid": True,
        "level_sizes": list(h.level_sizes),
        "depth": rep.depth,
        "children": [{"level": b.level, "min": b.min_children, "max": b.max_children,
                      "mean": b.mean_children} for b in rep.per_level],
        "digest": h.digest(),
    })
    return EXIT_OK


# -- score / select --------------------------------------------------------


def cmd_score(args) -> int:
    """Two streaming passes: the first accumulates the unlabeled mean, the second writes scores."""
    h = _hierarchy(args.hierarchy)
    labeled = _read_ids(args.labeled)

    def blocks():
        rows = ((n, rec) for n, rec in _jsonl(args.points) if _record_id(args.points, n, rec) not in labeled)
        for block in _chunks(rows):
            u, _ = propagate_batch(h, _levels_block(args.points, block, h), args.omega, label_uncertainty)
            yield block, u

    total = np.zeros(h.level_sizes[-1])
    count = 0
    for _, u in blocks():
        total += u.sum(axis=0)
        count += len(u)
    if count == 0:
        raise DataError("no unlabeled points to score")
    profile = GlobalProfile(total / count, count)
    with open(args.out, "w", encoding="utf-8") as out:
        for block, u in blocks():
            scores = u @ profile.mean_vector
            for (n, rec), s, row in zip(block, scores, u):
                out.write(json.dumps({"id": rec["id"], "score": float(s), "u": row.tolist()}) + "\n")
    log.info("scored %d points", count)
    return EXIT_OK


def cmd_select(args) -> int:
    ids, pos, feats = [], [], []
    for n, rec in _jsonl(args.points):
        ids.append(_record_id(args.points, n, rec))
        try:
            xyz = [float(v) for v in rec["xyz"]]
            feat = [float(v) for v in rec["feat"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{args.points}:{n}: need numeric 'xyz' and 'feat'") from exc
        if len(xyz) != 3:
            raise DataError(f"{args.points}:{n}: 'xyz' must have 3 coordinates")
        pos.append(xyz)
        feats.append(feat)
    if not ids:
        raise DataError(f"{args.points}: no points")
    if len(set(ids)) != len(ids):
        raise DataError(f"{args.points}: duplicate point ids")
    if len({len(f) for f in feats}) != 1:
        raise DataError(f"{args.points}: feature vectors differ in length")
    row_of = {pid: k for k, pid in enumerate(ids)}
    scores = np.zeros(len(ids))
    scored = np.zeros(len(ids), dtype=bool)
    for n, rec in _jsonl(args.scores):
        pid = _record_id(args.scores, n, rec)
        if pid not in row_of:
            raise DataError(f"{args.scores}:{n}: unknown point id {pid}")
        scores[row_of[pid]] = float(rec["score"])
        scored[row_of[pid]] = True
    labeled = np.zeros(len(ids), dtype=bool)
    for pid in _read_ids(args.labeled):
        if pid in row_of:
            labeled[row_of[pid]] = True
    if np.any(~scored & ~labeled):
        missing = [ids[k] for k in np.flatnonzero(~scored & ~labeled)[:5]]
        raise DataError(f"unlabeled point(s) without a score, e.g. {missing}")

    cfg = SelectionConfig(
        budget_points=budget_from_fraction(args.budget_frac, len(ids)),
        points_per_voxel=args.points_per_voxel,
        fds_threshold=args.fds_threshold,
        fds_radius=args.fds_radius,
        voxel_sizes=tuple(args.voxel_sizes),
    )
    res = multi_scale_select(np.array(pos), np.array(feats), scores, cfg, labeled, args.round)
    doc = {
        "round": res.round_index,
        "selected": [ids[k] for k in res.selected_ids],
        "rejected_by_fds": [ids[k] for k in res.rejected_by_fds],
    }
    Path(args.out).write_text(json.dumps(doc) + "\n", encoding="utf-8")
    if len(res.selected) < cfg.budget_points:
        log.warning("selected %d of %d budget points", len(res.selected), cfg.budget_points)
    return EXIT_OK


# -- fusion ----------------------------------------------------------------


def _fusion_data(path, h: LabelHierarchy) -> tuple[list[np.ndarray], np.ndarray]:
    records = list(_jsonl(path))
    if not records:
        raise DataError(f"{path}: no samples")
    labels = []
    for n, rec in records:
        y = rec.get("label")
        if not isinstance(y, int) or isinstance(y, bool):
            raise DataError(f"{path}:{n}: 'label' must be an integer fine-label index")
        labels.append(y)
    return _levels_block(path, records, h), np.array(labels, dtype=np.int64)


def cmd_fuse_train(args) -> int:
    from .fusion import fusion_train, save_checkpoint

    h = _hierarchy(args.hierarchy)
    per_level, y = _fusion_data(args.data, h)
    res = fusion_train((per_level, y), epochs=args.epochs, lr=args.lr, seed=args.seed or 0,
                       hidden_dim=args.hidden, batch_size=args.batch_size)
    save_checkpoint(res.params, args.ckpt, h.digest())
    _emit({"ckpt": str(args.ckpt), "epochs": args.epochs, "final_loss": res.losses[-1],
           "losses": res.losses})
    return EXIT_OK


def cmd_fuse_eval(args) -> int:
    from .fusion import fuse_baseline, load_checkpoint, predict

    h = _hierarchy(args.hierarchy)
    params = load_checkpoint(args.ckpt, h.digest())
    per_level, y = _fusion_data(args.data, h)
    acc = {
        "attention": float((predict(params, per_level) == y).mean()),
        "simple-add": float((fuse_baseline(h, per_level, "simple-add").argmax(axis=1) == y).mean()),
        "weighted-add": float((fuse_baseline(h, per_level, "weighted-add").argmax(axis=1) == y).mean()),
        "fine-only": float((per_level[-1].argmax(axis=1) == y).mean()),
    }
    _emit({"samples": int(len(y)), "accuracy": acc})
    return EXIT_OK


def cmd_fuse_synth(args) -> int:
    from .simulator.fusion_task import fusion_task

    h = _hierarchy(args.hierarchy)
    per_level, y = fusion_task(h, args.num, args.seed or 0, coarse_strength=args.coarse_strength,
                               coarse_flip=args.coarse_flip)
    with open(args.out, "w", encoding="utf-8") as f:
        for k in range(len(y)):
            f.write(json.dumps({"id": k, "levels": [p[k].tolist() for p in per_level],
                                "label": int(y[k])}) + "\n")
    return EXIT_OK


# -- simulator -------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .simulator.report import load_config_file, plan_from_dict, run_plan, write_outputs

    if not args.config:
        raise UsageError("simulate: --config is required")
    if not args.out_dir:
        raise UsageError("simulate: --out-dir is required")
    plan = plan_from_dict(load_config_file(args.config), args.seed)
    reports = run_plan(plan)
    paths = write_outputs(reports, args.out_dir)
    _emit({"runs": len(reports), "outputs": [str(p) for p in paths],
           "final_miou": {f"{r.run_id}/{r.seed}": r.final_miou for r in reports}})
    return EXIT_OK


def cmd_report(args) -> int:
    from .simulator.report import comparison_table, read_metrics

    table = comparison_table(read_metrics(args.metrics), args.reference, args.baseline)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one number")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--log-level", default=argparse.SUPPRESS,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], type=str.upper)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("--out-dir", default=argparse.SUPPRESS)

    p = _Parser(prog="hieract", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"hieract {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    hp = sub.add_parser("hierarchy", help="generate or validate label hierarchies")
    hsub = hp.add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = hsub.add_parser("generate", parents=[common], help="build a hierarchy with a language model")
    g.add_argument("--labels", required=True, help="text file, one fine label per line")
    g.add_argument("--depth", type=int, default=3)
    g.add_argument("--out", required=True)
    g.add_argument("--offline", help="directory of canned replies used instead of the endpoint")
    g.add_argument("--max-iterations", type=int, default=5)
    g.add_argument("--balance-bound", type=float, default=4.0)
    g.add_argument("--model", default="gpt-4o")
    g.set_defaults(func=cmd_hierarchy_generate)
    v = hsub.add_parser("validate", parents=[common], help="check a hierarchy file")
    v.add_argument("file")
    v.set_defaults(func=cmd_hierarchy_validate)

    s = sub.add_parser("score", parents=[common], help="hierarchical uncertainty scores (JSONL)")
    s.add_argument("--hierarchy", required=True)
    s.add_argument("--points", required=True)
    s.add_argument("--omega", type=float, default=0.1)
    s.add_argument("--labeled", help="ids of already labeled points")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    sel = sub.add_parser("select", parents=[common], help="pick points to annotate")
    sel.add_argument("--hierarchy", required=True)
    sel.add_argument("--points", required=True)
    sel.add_argument("--scores", required=True)
    sel.add_argument("--budget-frac", type=float, default=0.0002)
    sel.add_argument("--voxel-sizes", type=_float_list, default=[0.2, 0.4])
    sel.add_argument("--fds-threshold", type=float, default=0.95)
    sel.add_argument("--fds-radius", type=float, default=0.3)
    sel.add_argument("--points-per-voxel", type=int, default=1)
    sel.add_argument("--round", type=int, default=0)
    sel.add_argument("--labeled")
    sel.add_argument("--out", required=True)
    sel.set_defaults(func=cmd_select)

    fp = sub.add_parser("fuse", help="cross-level fusion network")
    fsub = fp.add_subparsers(dest="action", required=True, parser_class=_Parser)
    ft = fsub.add_parser("train", parents=[common])
    fe = fsub.add_parser("eval", parents=[common])
    for q in (ft, fe):
        q.add_argument("--hierarchy", required=True)
        q.add_argument("--data", required=True, help="JSONL records with 'levels' and 'label'")
        q.add_argument("--ckpt", required=True)
    ft.add_argument("--hidden", type=int, default=64)
    ft.add_argument("--epochs", type=int, default=100)
    ft.add_argument("--lr", type=float, default=0.1)
    ft.add_argument("--batch-size", type=int, default=32)
    ft.set_defaults(func=cmd_fuse_train)
    fe.set_defaults(func=cmd_fuse_eval)
    fs = fsub.add_parser("synth", parents=[common], help="write a synthetic fusion dataset")
    fs.add_argument("--hierarchy", required=True)
    fs.add_argument("--num", type=int, default=3000)
    fs.add_argument("--coarse-strength", type=_float_list, default=[4.0, 1.5])
    fs.add_argument("--coarse-flip", type=_float_list, default=[0.0, 0.3])
    fs.add_argument("--out", required=True)
    fs.set_defaults(func=cmd_fuse_synth)

    sim = sub.add_parser("simulate", parents=[common], help="run the synthetic active-learning benchmark")
    sim.set_defaults(func=cmd_simulate)

    rp = sub.add_parser("report", parents=[common], help="compare final mIoU across metrics.csv files")
    rp.add_argument("metrics", nargs="+")
    rp.add_argument("--reference", default="full")
    rp.add_argument("--baseline", default="random")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def _fail(code: int, exc: BaseException) -> int:
    info: dict[str, Any] = {"error": type(exc).__name__, "message": str(exc), "exit": code}
    for attr in ("epoch", "code", "failures"):
        if hasattr(exc, attr):
            info[attr] = getattr(exc, attr)
    sys.stderr.write(json.dumps(info) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for name, default in (("log_level", "WARNING"), ("seed", None), ("config", None), ("out_dir", None)):
            if not hasattr(args, name):
                setattr(args, name, default)
        logging.basicConfig(level=args.log_level, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(parser.format_usage())
        return _fail(EXIT_USAGE, exc)
    except ServiceError as exc:
        return _fail(EXIT_SERVICE, exc)
    except (HieractError, OSError, UnicodeDecodeError) as exc:
        return _fail(EXIT_DATA, exc)


if __name__ == "__main__":
    sys.exit(main())
