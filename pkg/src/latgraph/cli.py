"""Command-line entry point.

Exit codes: 0 success, 1 runtime assertion, 2 usage or configuration error,
3 file-system error. Configs are JSON; ``--set a.b=value`` overrides a leaf
(values are parsed as JSON when possible). ``LATGRAPH_SEED`` supplies the
seed when neither a flag nor the config does.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import gcn, harness
from .errors import ConfigError, InsufficientDataError, LatGraphError, ShapeError, TraceParseError, ValidationError
from .graph import UNOBSERVED, LatencyGraph, build_features, build_graph, norm_constant, renormalize
from .stats import build_empirical_pdf, classify_service_level
from .tracegen import (WorldConfig, generate_world, grid_adjacency, group_by_vertex, ingest_csv,
                       sample_slot, world_from_dict, write_csv)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
PLOT_KINDS = ("reward", "accuracy", "loss_curves", "feature_sweep")


class UsageError(Exception):
    """Bad flags or inputs that do not match the requested operation."""


# -- config plumbing -----------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: Sequence[str]) -> dict:
    """Set dotted-path leaves, e.g. ``gcn.lr=0.005`` or ``world.grid.rows=4``."""
    out = json.loads(json.dumps(config))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {key}: {p!r} is not a section")
        node[parts[-1]] = _parse_value(value)
    return out


def read_json(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return data


def _env_seed() -> int | None:
    raw = os.environ.get("LATGRAPH_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"LATGRAPH_SEED must be an integer, got {raw!r}") from exc


def resolve_world_dict(data: dict, seed_flag: int | None) -> dict:
    """World section of a world or experiment config, with seed precedence flag > config > env > 0."""
    world = dict(data.get("world", data))
    if seed_flag is not None:
        world["seed"] = seed_flag
    elif "seed" not in world:
        env = _env_seed()
        world["seed"] = 0 if env is None else env
    return world


def load_experiment(path: str | Path, overrides: Sequence[str], seed_flag: int | None = None) -> harness.ExperimentConfig:
    """Experiment config from a config file or a run manifest (its ``config`` key)."""
    data = read_json(path)
    if "config" in data and "world" not in data:
        data = data["config"]
    data = apply_overrides(data, overrides)
    data["world"] = resolve_world_dict(data, seed_flag)
    cfg = harness.ExperimentConfig.from_dict(data)
    cfg.validate()
    return cfg


def parse_int_list(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise UsageError("empty integer list")
    return values


def prepare_out_dir(path: str | Path, names: Sequence[str], force: bool) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    clash = [n for n in names if (out / n).exists()]
    if clash and not force:
        raise FileExistsError(f"{out}: {', '.join(clash)} already exist (use --force)")
    return out


def write_manifest(path: Path, config: dict, seeds, artifacts: Sequence[str], finished: bool = False,
                   started: str | None = None) -> str:
    started = started or datetime.now(timezone.utc).isoformat()
    payload = {
        "tool": "latgraph",
        "version": __version__,
        "config": config,
        "seeds": list(seeds),
        "artifacts": list(artifacts),
        "started_at": started,
        "finished_at": datetime.now(timezone.utc).isoformat() if finished else None,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return started


# -- subcommands ---------------------------------------------------------------

def cmd_generate(args) -> int:
    data = apply_overrides(read_json(args.config), args.set)
    wcfg = WorldConfig.from_dict(resolve_world_dict(data, args.seed))
    world = generate_world(wcfg)
    n_slots = args.slots if args.slots is not None else int(data.get("n_slots", 1))
    spv = args.samples_per_vertex if args.samples_per_vertex is not None else int(data.get("samples_per_vertex", 30))
    if n_slots < 1 or spv < 1:
        raise UsageError("--slots and --samples-per-vertex must be >= 1")
    names = ["world.json", "manifest.json"] + [f"slot_{t:04d}.csv" for t in range(n_slots)]
    out = prepare_out_dir(args.out, names, args.force)
    started = write_manifest(out / "manifest.json", {"world": wcfg.to_dict(), "n_slots": n_slots,
                                                     "samples_per_vertex": spv}, [wcfg.seed], names[:1] + names[2:])
    (out / "world.json").write_text(json.dumps(world.to_dict(), indent=2), encoding="utf-8")
    for t in range(n_slots):
        write_csv(out / f"slot_{t:04d}.csv", sample_slot(world, t, spv))
    write_manifest(out / "manifest.json", {"world": wcfg.to_dict(), "n_slots": n_slots, "samples_per_vertex": spv},
                   [wcfg.seed], names[:1] + names[2:], finished=True, started=started)
    print(f"wrote {n_slots} slot file(s) for {world.n_vertices} vertices to {out}")
    return EXIT_OK


def _trace_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(f"traces not found: {path}")
    files = sorted(path.glob("slot_*.csv")) or sorted(path.glob("*.csv"))
    if not files:
        raise FileNotFoundError(f"no CSV traces in {path}")
    return files


def cmd_build_graph(args) -> int:
    traces = Path(args.traces)
    samples = [s for f in _trace_files(traces) for s in ingest_csv(f)]
    world_file = (traces if traces.is_dir() else traces.parent) / "world.json"
    if args.grid:
        try:
            rows, cols = (int(v) for v in args.grid.lower().split("x"))
        except ValueError as exc:
            raise UsageError(f"--grid expects ROWSxCOLS, got {args.grid!r}") from exc
        adjacency = grid_adjacency(rows, cols)
    elif world_file.is_file():
        adjacency = world_from_dict(json.loads(world_file.read_text(encoding="utf-8"))).adjacency
    else:
        raise UsageError("no world.json next to the traces; pass --grid ROWSxCOLS")
    n = adjacency.shape[0]
    per_vertex = group_by_vertex(samples, n)
    empty = [v for v, s in enumerate(per_vertex) if s.size == 0]
    if empty:
        raise ValidationError(f"vertices without samples: {empty[:10]}")
    edges = np.linspace(args.bin_lo, args.bin_hi, args.bins + 1)
    pdfs = [build_empirical_pdf(s, edges) for s in per_vertex]
    norm = norm_constant(per_vertex)
    feats = build_features(per_vertex, args.f_dim, norm)
    labels = np.array([classify_service_level(p).class_index for p in pdfs])
    graph = build_graph(pdfs, adjacency, args.eta, feats, labels=labels, norm_constant=norm)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} already exists (use --force)")
    out.parent.mkdir(parents=True, exist_ok=True)
    graph.save(out)
    print(f"graph: n={graph.n} edges={len(graph.edges)} features={feats.shape[1]} -> {out}")
    return EXIT_OK


def _split_masks(graph: LatencyGraph, train_fraction: float, val_fraction: float, seed: int) -> dict:
    if any(m.any() for m in graph.masks.values()):
        return graph.masks
    labelled = np.nonzero(graph.labels != UNOBSERVED)[0]
    if labelled.size < 3:
        raise ValidationError("need at least 3 labelled vertices to split train/val/test")
    perm = np.random.default_rng([seed, 30]).permutation(labelled)
    n_train = max(1, int(round(train_fraction * labelled.size)))
    n_val = max(1, int(round(val_fraction * labelled.size)))
    masks = {k: np.zeros(graph.n, dtype=bool) for k in ("train", "val", "test")}
    masks["train"][perm[:n_train]] = True
    masks["val"][perm[n_train:n_train + n_val]] = True
    masks["test"][perm[n_train + n_val:]] = True
    return masks


def cmd_train_gcn(args) -> int:
    graph_path = Path(args.graph)
    if not graph_path.is_file():
        raise FileNotFoundError(f"graph not found: {graph_path}")
    graph = LatencyGraph.load(graph_path)
    data = apply_overrides(read_json(args.config) if args.config else {}, args.set)
    seed = args.seed if args.seed is not None else data.get("seed", _env_seed() or 0)
    try:
        gcfg = gcn.GcnConfig(**{**data.get("gcn", {}), "seed": int(seed)})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if args.optimizer:
        gcfg = dataclasses.replace(gcfg, optimizer=args.optimizer)
    gcfg.validate()
    masks = _split_masks(graph, args.train_fraction, args.val_fraction, gcfg.seed)
    graph = graph.with_labels(graph.labels, masks)
    k = int(args.classes or max(int(graph.labels.max()) + 1, 2))
    prop = renormalize(graph.adjacency)
    out = prepare_out_dir(args.out, ["checkpoint.json", "history.csv", "metrics.json"], args.force)
    result = gcn.train(graph, prop, gcfg, k)
    probs = gcn.predict(result.model, prop, graph.features)
    metrics = {"epochs_run": result.epochs_run, "best_epoch": result.best_epoch,
               "initial_val_loss": result.initial_val_loss, "best_val_loss": result.best_val_loss}
    if graph.masks["test"].any():
        metrics["test_accuracy"] = gcn.accuracy(probs, graph.labels, graph.masks["test"])
    gcn.save_checkpoint(out / "checkpoint.json", result.model, gcfg)
    gcn.write_history_csv(out / "history.csv", result.history)
    harness.write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_experiment(args.config, args.set, args.seed)
    if args.seeds:
        cfg.seeds = parse_int_list(args.seeds)
    if args.policy:
        cfg.policies = ["dqn", "random"] if args.policy == "both" else [args.policy]
    if args.slots is not None:
        cfg.n_slots = args.slots
    cfg.validate()
    names = ["reports.csv", "summary.json"]
    out = prepare_out_dir(args.out, names + ["manifest.json"], args.force)
    started = write_manifest(out / "manifest.json", cfg.to_dict(), cfg.seeds, names)
    reports, summary = harness.run_experiment(cfg)
    harness.write_reports_csv(out / "reports.csv", reports)
    harness.write_json(out / "summary.json", summary)
    write_manifest(out / "manifest.json", cfg.to_dict(), cfg.seeds, names, finished=True, started=started)
    for policy, s in summary["policies"].items():
        print(f"{policy}: tail mean accuracy {s['tail_mean']:.4f}")
    return EXIT_OK


def cmd_sweep_features(args) -> int:
    cfg = load_experiment(args.config, args.set, args.seed)
    if args.seeds:
        cfg.seeds = parse_int_list(args.seeds)
    f_dims = parse_int_list(args.f_dims)
    names = ["feature_sweep.csv", "feature_sweep.json"]
    out = prepare_out_dir(args.out, names + ["manifest.json"], args.force)
    started = write_manifest(out / "manifest.json", cfg.to_dict(), cfg.seeds, names)
    table = harness.run_feature_sweep(cfg, f_dims)
    with open(out / "feature_sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["f_dim", "seed", "accuracy"])
        for f, row in table.items():
            for seed, acc in zip(cfg.seeds, row["per_seed"]):
                w.writerow([f, seed, repr(acc)])
    harness.write_json(out / "feature_sweep.json", {str(f): v for f, v in table.items()})
    write_manifest(out / "manifest.json", cfg.to_dict(), cfg.seeds, names, finished=True, started=started)
    for f, row in table.items():
        print(f"f_dim={f}: mean accuracy {row['mean_accuracy']:.4f}")
    return EXIT_OK


def cmd_compare_optimizers(args) -> int:
    cfg = load_experiment(args.config, args.set, args.seed)
    seeds = parse_int_list(args.seeds) if args.seeds else cfg.seeds
    names = ["curves.csv", "comparison.json"]
    out = prepare_out_dir(args.out, names + ["manifest.json"], args.force)
    started = write_manifest(out / "manifest.json", cfg.to_dict(), seeds, names)
    result = harness.run_optimizer_comparison(cfg, seeds)
    with open(out / "curves.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "optimizer", "seed", "train_loss", "val_loss", "val_acc"])
        for opt, runs in result["runs"].items():
            for r in runs:
                for h in r["history"]:
                    w.writerow([h.epoch, opt, r["seed"], repr(h.train_loss), repr(h.val_loss), repr(h.val_acc)])
    harness.write_json(out / "comparison.json", {"curves": result["curves"], "summary": result["summary"]})
    write_manifest(out / "manifest.json", cfg.to_dict(), seeds, names, finished=True, started=started)
    for opt, s in result["summary"].items():
        accs = list(s["test_accuracy"].values())
        print(f"{opt}: mean test accuracy {np.mean(accs):.4f}")
    return EXIT_OK


def _read_rows(path: Path, required: Sequence[str]) -> list[dict]:
    if not path.is_file():
        raise FileNotFoundError(f"reports not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise UsageError(f"{path} lacks columns {missing} needed for this plot kind")
        return list(reader)


def _band_rows(rows: list[dict], x_col: str, series_col: str, y_col: str) -> list[list]:
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((int(r[x_col]), r[series_col]), []).append(float(r[y_col]))
    out = []
    for (x, series) in sorted(groups, key=lambda g: (g[1], g[0])):
        v = np.asarray(groups[(x, series)])
        out.append([x, series, repr(float(v.mean())), repr(float(v.min())), repr(float(v.max()))])
    return out


def _carry_forward(rows: list[dict], y_col: str) -> list[dict]:
    """Extend early-stopped runs to the longest run so every epoch averages all seeds."""
    runs: dict[tuple, list[dict]] = {}
    for r in rows:
        runs.setdefault((r["optimizer"], r["seed"]), []).append(r)
    length = max((len(v) for v in runs.values()), default=0)
    out = []
    for (opt, seed), rs in runs.items():
        rs = sorted(rs, key=lambda r: int(r["epoch"]))
        for e in range(length):
            src = rs[min(e, len(rs) - 1)]
            out.append({"epoch": str(e + 1), "optimizer": opt, y_col: src[y_col]})
    return out


PLOT_SPECS: dict[str, tuple[list[str], list[str], Callable[[list[dict]], list[list]]]] = {
    "reward": (["slot", "policy", "accuracy"], ["slot", "policy", "mean", "min", "max"],
               lambda rows: _band_rows(rows, "slot", "policy", "accuracy")),
    "loss_curves": (["epoch", "optimizer", "seed", "val_loss"], ["epoch", "optimizer", "mean", "min", "max"],
                    lambda rows: _band_rows(_carry_forward(rows, "val_loss"), "epoch", "optimizer", "val_loss")),
    "accuracy": (["epoch", "optimizer", "seed", "val_acc"], ["epoch", "optimizer", "mean", "min", "max"],
                 lambda rows: _band_rows(_carry_forward(rows, "val_acc"), "epoch", "optimizer", "val_acc")),
    "feature_sweep": (["f_dim", "seed", "accuracy"], ["f_dim", "series", "mean", "min", "max"],
                      lambda rows: _band_rows([{**r, "series": "gcn"} for r in rows], "f_dim", "series", "accuracy")),
}


def cmd_plotdata(args) -> int:
    required, header, build = PLOT_SPECS[args.kind]
    rows = _read_rows(Path(args.reports), required)
    out_rows = build(rows) if rows else []
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} already exists (use --force)")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(out_rows)
    print(f"{args.kind}: {len(out_rows)} row(s) -> {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    data = apply_overrides(read_json(args.config), args.set)
    if "config" in data and "world" not in data:
        data = data["config"]
    kind = args.kind
    if kind == "auto":
        kind = "experiment" if "world" in data else "world"
    if kind == "world":
        WorldConfig.from_dict(resolve_world_dict(data, args.seed)).validate()
    else:
        data["world"] = resolve_world_dict(data, args.seed)
        harness.ExperimentConfig.from_dict(data).validate()
    print(f"{args.config}: valid {kind} config")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latgraph", description="Latency-graph reconstruction toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("-c", "--config", required=config_required, help="JSON config (or run manifest)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config leaf by dotted path; repeatable")
        p.add_argument("--seed", type=int, default=None, help="seed (falls back to config, then LATGRAPH_SEED)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("generate", help="sample a synthetic world into per-slot CSV traces")
    common(p)
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--slots", type=int, default=None, help="number of slots to write")
    p.add_argument("--samples-per-vertex", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("build-graph", help="build a JS-pruned latency graph from traces")
    p.add_argument("-t", "--traces", required=True, help="trace CSV or directory of slot_*.csv")
    p.add_argument("-o", "--out", required=True, help="graph JSON path")
    p.add_argument("--eta", type=float, default=harness.DEFAULT_ETA)
    p.add_argument("--f-dim", type=int, default=30)
    p.add_argument("--grid", default=None, help="ROWSxCOLS when no world.json accompanies the traces")
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--bin-lo", type=float, default=0.0)
    p.add_argument("--bin-hi", type=float, default=500.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train-gcn", help="train the GCN on a graph file")
    common(p, config_required=False)
    p.add_argument("-g", "--graph", required=True)
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--optimizer", choices=["ngd", "adam"], default=None)
    p.add_argument("--classes", type=int, default=None, help="number of classes (default: inferred)")
    p.add_argument("--train-fraction", type=float, default=0.2)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_train_gcn)

    p = sub.add_parser("simulate", help="run the slotted probe-and-reconstruct loop")
    common(p)
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--policy", choices=["dqn", "random", "both"], default=None)
    p.add_argument("--seeds", default=None, help="comma-separated seeds, e.g. 1,2,3")
    p.add_argument("--slots", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep-features", help="test accuracy against feature dimension")
    common(p)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--f-dims", default="5,10,20,30")
    p.add_argument("--seeds", default=None)
    p.set_defaults(func=cmd_sweep_features)

    p = sub.add_parser("compare-optimizers", help="NGD against Adam on static tasks")
    common(p)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--seeds", default=None)
    p.set_defaults(func=cmd_compare_optimizers)

    p = sub.add_parser("plotdata", help="emit plot-ready CSV from run outputs")
    p.add_argument("-r", "--reports", required=True, help="reports.csv, curves.csv or feature_sweep.csv")
    p.add_argument("--kind", required=True, choices=PLOT_KINDS)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("validate", help="check a world or experiment config")
    common(p)
    p.add_argument("--kind", choices=["auto", "world", "experiment"], default="auto")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError, TraceParseError, ValidationError, InsufficientDataError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (AssertionError, LatGraphError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
