"""Command-line entry point: ``chprec <command> [options]``.

Every option can also be given in a ``--config`` file of ``key = value``
lines, keyed by the long flag name (``drop-ratio = 0.1``) or its underscore
form.  Precedence: dataset defaults < config file < command-line flags.
Each run writes ``<command>.manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data, evaluation, graph, model, oscillation, training
from .errors import ChprecError, ConfigError, UnknownCommand
from .training import TrainConfig

log = logging.getLogger("chprec")

# flag dest -> TrainConfig field
TRAIN_FIELDS = {
    "model": "model", "layers": "L", "dim": "d", "lr": "lr", "lambda": "lam",
    "epsilon": "epsilon", "drop_ratio": "drop_ratio", "batch_size": "batch_size",
    "epochs": "max_epochs", "patience": "patience", "eval_every": "eval_every",
    "seed": "seed", "k": "K_eval", "final_layer_only": "final_layer_only",
    "identity_exempt": "identity_exempt",
}
FIELD_TO_FLAG = {v: k for k, v in TRAIN_FIELDS.items()}
EPSILON_GRID = [0.1, 0.05, 0.02, 0.01, 0.008, 0.006, 0.005, 0.004, 0.003, 0.002, 0.001, 5e-4]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="file of key = value lines")
    p.add_argument("--out-dir", help="directory for outputs (default: runs/<command>)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=sorted(training.DGCF_DEFAULTS),
                   help="selects per-dataset default hyperparameters (default ml100k)")
    p.add_argument("--splits", help="processed split file from prepare-data")
    p.add_argument("--model", choices=model.MODEL_KINDS)
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--drop-ratio", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int, help="maximum epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--eval-every", type=int, help="epochs between validations")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, help="cutoff for Recall/NDCG")
    p.add_argument("--final-layer-only", action="store_true",
                   help="score with the last layer instead of the layer mean")
    p.add_argument("--identity-exempt", action="store_true",
                   help="ablation: skip LA scaling on the self term")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chprec", description="Cross-hop graph collaborative filtering toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("prepare-data", help="load, filter and split a ratings file")
    _add_common(p)
    p.add_argument("--dataset", choices=sorted(data.DATASET_PREP))
    p.add_argument("--input", help="raw ratings file")
    p.add_argument("--rating-threshold", type=float)
    p.add_argument("--core", type=int, help="minimum interactions per user")
    p.add_argument("--item-core", type=int, help="minimum interactions per item")
    p.add_argument("--fractions", type=_float_list, help="train,val,test (default 0.7,0.1,0.2)")
    p.add_argument("--seed", type=int, help="split seed (default 0)")

    p = sub.add_parser("train", help="train a model and save checkpoint and log")
    _add_common(p)
    _add_train_flags(p)

    p = sub.add_parser("evaluate", help="Recall/NDCG of a checkpoint on a split")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--on", choices=["test", "val"], help="which held-out split (default test)")
    p.add_argument("--groups", type=int, help="density groups to report (0 = none)")

    p = sub.add_parser("analyze-oscillation", help="random-walk parity trace and bound")
    _add_common(p)
    p.add_argument("--graph", choices=["k11", "path", "star", "random", "splits"],
                   help="synthetic graph or the training graph of --splits (default path)")
    p.add_argument("--splits")
    p.add_argument("--nodes", type=int, help="node budget for --graph random")
    p.add_argument("--seed", type=int)
    p.add_argument("--augment", action="store_true", help="add the cross-hop pattern A + A^2")
    p.add_argument("--start", type=int, help="node holding the initial unit mass (default 0)")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--bound-k", type=int, help="k for the even/odd gap bound (default 2)")

    p = sub.add_parser("layer-sweep", help="final-layer-only Recall across depths")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--depths", type=_int_list, help="e.g. 1-6 or 1,2,4 (default 1-6)")
    p.add_argument("--repeats", type=int, help="seeds per depth (default 3)")

    p = sub.add_parser("export-patterns", help="per-layer windows of diag(alpha)(L + Lc)")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--window", type=int, help="window size (default 30)")
    p.add_argument("--row-start", type=int)
    p.add_argument("--col-start", type=int)

    p = sub.add_parser("select-epsilon", help="cross/direct edge counts over an epsilon grid")
    _add_common(p)
    p.add_argument("--splits")
    p.add_argument("--grid", type=_float_list, help="comma-separated thresholds")
    return parser


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def read_config_file(path, parser: argparse.ArgumentParser) -> dict:
    """Parse ``key = value`` lines into typed values using the parser's actions."""
    actions = {a.dest: a for a in parser._actions if a.option_strings}
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            dest = key.replace("-", "_")
            if dest not in actions and dest in FIELD_TO_FLAG:
                dest = FIELD_TO_FLAG[dest]
            action = actions.get(dest)
            if action is None or dest in ("config", "help"):
                raise ConfigError(f"{path}:{n}: unknown key {key!r}")
            try:
                if action.nargs == 0:
                    out[dest] = _parse_bool(value)
                else:
                    out[dest] = action.type(value) if action.type else value
            except ValueError as exc:
                raise ConfigError(f"{path}:{n}: bad value for {key!r}: {exc}") from None
            if action.choices is not None and out[dest] not in action.choices:
                raise ConfigError(f"{path}:{n}: {key} must be one of {sorted(action.choices)}")
    return out


def resolve_options(parser: argparse.ArgumentParser, argv: list[str]) -> tuple[str, dict]:
    """Layer config-file values under explicitly given flags."""
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        raise SystemExit(2)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    given = {k: v for k, v in vars(args).items()
             if v is not None and v is not False and k not in ("command", "verbose")}
    opts = {}
    if given.get("config"):
        opts.update(read_config_file(given["config"], sub))
    opts.update(given)
    opts["verbose"] = bool(getattr(args, "verbose", False) or opts.get("verbose"))
    return args.command, opts


def train_config(opts: dict) -> TrainConfig:
    dataset = opts.get("dataset", "ml100k")
    kind = opts.get("model", "dgcf")
    kw = training.dataset_defaults(dataset, kind)
    for dest, fld in TRAIN_FIELDS.items():
        if dest in opts:
            kw[fld] = opts[dest]
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in kw.items() if k in names})


def _out_dir(command: str, opts: dict) -> Path:
    out = Path(opts.get("out_dir") or Path("runs") / command)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(opts: dict, key: str) -> str:
    if not opts.get(key):
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    return opts[key]


def write_manifest(out: Path, command: str, opts: dict, config: TrainConfig | None,
                   paths: dict, seed) -> Path:
    manifest = {
        "command": command,
        "options": {k: v for k, v in sorted(opts.items()) if k != "verbose"},
        "config": config.to_dict() if config is not None else None,
        "paths": {k: str(v) for k, v in paths.items()},
        "seed": seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = out / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def cmd_prepare_data(opts: dict) -> None:
    dataset = opts.get("dataset", "ml100k")
    fmt, thr, core, item_core = data.DATASET_PREP[dataset]
    thr = opts.get("rating_threshold", thr)
    core = opts.get("core", core)
    item_core = opts.get("item_core", item_core)
    fractions = tuple(opts.get("fractions", (0.7, 0.1, 0.2)))
    seed = opts.get("seed", 0)
    src = _require(opts, "input")
    raws = data.load_ratings(src, fmt)
    g, kept, ui, ii = data.preprocess(raws, thr, core, item_core)
    splits = data.split(kept, g.n_users, g.n_items, fractions, seed, ui, ii)
    out = _out_dir("prepare-data", opts)
    path = out / "splits.txt"
    data.save_splits(splits, path)
    opts_used = dict(opts, dataset=dataset, rating_threshold=thr, core=core,
                     item_core=item_core, fractions=list(fractions), seed=seed)
    write_manifest(out, "prepare-data", opts_used, None, {"input": src, "splits": path}, seed)
    print(f"{len(raws)} ratings -> {g.n_users} users, {g.n_items} items, {len(kept)} interactions; "
          f"train/val/test = {len(splits.train_edges)}/{len(splits.val_edges)}/"
          f"{len(splits.test_edges)} -> {path}")


def cmd_train(opts: dict) -> None:
    config = train_config(opts)
    splits = data.load_splits(_require(opts, "splits"))
    out = _out_dir("train", opts)

    def progress(row):
        if not np.isnan(row["val_recall"]):
            log.info("epoch %d loss %.3f val recall %.4f ndcg %.4f", row["epoch"], row["loss"],
                     row["val_recall"], row["val_ndcg"])

    result = training.train(splits, config, progress)
    ckpt, log_path = out / "model.ckpt", out / "train_log.csv"
    model.save_checkpoint(result.params, ckpt)
    training.write_log(result.log, log_path)
    write_manifest(out, "train", opts, config,
                   {"splits": opts["splits"], "checkpoint": ckpt, "log": log_path}, config.seed)
    print(f"best epoch {result.best_epoch}, val recall@{config.K_eval} "
          f"{result.best_val_recall:.4f} -> {ckpt}")


def _config_for_checkpoint(opts: dict) -> TrainConfig:
    """Training config stored beside the checkpoint, overridden by given options."""
    manifest = Path(opts["checkpoint"]).parent / "train.manifest.json"
    merged = {}
    if manifest.exists():
        merged.update(json.loads(manifest.read_text()).get("options", {}))
    merged.update({k: v for k, v in opts.items() if k in TRAIN_FIELDS or k == "dataset"})
    return train_config(merged)


def cmd_evaluate(opts: dict) -> None:
    _require(opts, "checkpoint")
    config = _config_for_checkpoint(opts)
    splits = data.load_splits(_require(opts, "splits"))
    params = model.load_checkpoint(opts["checkpoint"])
    op = training.build_operator(splits.graph, config)
    final = training.model_final(params, op, config)
    which = opts.get("on", "test")
    report = evaluation.recall_ndcg(final, splits.n_users, splits.items_by_user("train"),
                                    splits.items_by_user(which), config.K_eval)
    n_groups = opts.get("groups", 0)
    if n_groups:
        report = evaluation.density_groups(report, splits.graph.user_degrees(), n_groups)
    out = _out_dir("evaluate", opts)
    path = out / "metrics.csv"
    report.write_csv(path)
    write_manifest(out, "evaluate", opts, config,
                   {"checkpoint": opts["checkpoint"], "splits": opts["splits"], "metrics": path},
                   config.seed)
    print(f"{which}: recall@{report.k} {report.recall_at_k:.4f} ndcg@{report.k} "
          f"{report.ndcg_at_k:.4f} over {len(report.per_user)} users -> {path}")
    for label, r, n in report.groups or []:
        print(f"  group {label}: recall {r:.4f} ndcg {n:.4f}")


def _oscillation_graph(opts: dict):
    kind = opts.get("graph", "path")
    seed = opts.get("seed", 0)
    if kind == "splits":
        g = data.load_splits(_require(opts, "splits")).graph
    elif kind == "k11":
        g = graph.BipartiteGraph.from_edges(1, 1, [(0, 0)])
    elif kind == "path":
        g = graph.BipartiteGraph.from_edges(2, 2, [(0, 0), (0, 1), (1, 1)])
    elif kind == "star":
        g = graph.BipartiteGraph.from_edges(1, 3, [(0, 0), (0, 1), (0, 2)])
    else:
        rng = np.random.default_rng(seed)
        n = opts.get("nodes", 10)
        if n < 2:
            raise ConfigError("--nodes must be >= 2")
        n_users = int(rng.integers(1, n))
        n_items = n - n_users
        # every node gets one edge to the other side, then extras
        edges = {(u, int(rng.integers(0, n_items))) for u in range(n_users)}
        edges |= {(int(rng.integers(0, n_users)), i) for i in range(n_items)}
        edges |= {(int(rng.integers(0, n_users)), int(rng.integers(0, n_items))) for _ in range(n)}
        g = graph.BipartiteGraph.from_edges(n_users, n_items, sorted(edges))
    return g


def cmd_analyze_oscillation(opts: dict) -> None:
    import csv

    g = _oscillation_graph(opts)
    a = graph.build_adjacency(g)
    if opts.get("augment"):
        a = oscillation.cross_hop_augment(a)
    x0 = np.zeros(g.n_nodes)
    start = opts.get("start", 0)
    if not 0 <= start < g.n_nodes:
        raise ConfigError(f"--start must be in [0, {g.n_nodes})")
    x0[start] = 1.0
    trace = oscillation.detect_oscillation(
        a, x0, opts.get("max_steps", oscillation.DEFAULT_MAX_STEPS),
        opts.get("tol", oscillation.DEFAULT_TOL))
    out = _out_dir("analyze-oscillation", opts)
    trace_path = out / "trace.csv"
    with open(trace_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "parity", "dist_even_limit", "dist_odd_limit"])
        for t, parity, de, do in oscillation.trace_rows(a, x0, trace):
            w.writerow([t, parity, repr(de), repr(do)])
    report = {"n_users": g.n_users, "n_items": g.n_items, "augmented": bool(opts.get("augment")),
              "steps": trace.n_steps, "oscillating": trace.oscillating,
              "amplitude": trace.amplitude}
    if not opts.get("augment"):
        k = opts.get("bound_k", 2)
        lhs, bound = oscillation.oscillation_bound(a, g.n_users, x0, k)
        report.update(bound_k=k, bound_lhs=lhs, bound_rhs=bound, bound_holds=lhs <= bound + 1e-12,
                      vanishing=oscillation.vanishing_condition(a, g.n_users, trace.even_limit))
    report_path = out / "oscillation.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "analyze-oscillation", opts, None,
                   {"trace": trace_path, "report": report_path}, opts.get("seed", 0))
    state = "oscillating" if trace.oscillating else "settled"
    print(f"{state}: amplitude {trace.amplitude:.3g} after {trace.n_steps} steps -> {trace_path}")
    if "bound_lhs" in report:
        print(f"gap after 2k={2 * report['bound_k']} steps: {report['bound_lhs']:.6g} "
              f"<= bound {report['bound_rhs']:.6g}")


def cmd_layer_sweep(opts: dict) -> None:
    config = train_config(opts)
    splits = data.load_splits(_require(opts, "splits"))
    depths = opts.get("depths", list(range(1, 7)))
    repeats = opts.get("repeats", 3)
    sweep = evaluation.layer_difference_experiment(
        splits, config, depths, repeats,
        progress=lambda m, d, r, rec: log.info("%s depth %d seed %d recall %.4f", m, d, r, rec))
    out = _out_dir("layer-sweep", opts)
    path = out / "sweep.csv"
    sweep.write_csv(path)
    write_manifest(out, "layer-sweep", dict(opts, depths=depths, repeats=repeats), config,
                   {"splits": opts["splits"], "sweep": path}, config.seed)
    print(f"{config.model}: mean |delta| {sweep.mean_abs_delta():.4f}, "
          f"sign alternations {sweep.sign_alternations()} -> {path}")


def cmd_export_patterns(opts: dict) -> None:
    _require(opts, "checkpoint")
    config = _config_for_checkpoint(opts)
    splits = data.load_splits(_require(opts, "splits"))
    params = model.load_checkpoint(opts["checkpoint"])
    a = graph.build_adjacency(splits.graph)
    l = graph.sym_normalize(a)
    lc = graph.cross_hop_matrix(a, config.epsilon, config.keep_cross_diagonal)
    size = opts.get("window", 30)
    r0, c0 = opts.get("row_start", 0), opts.get("col_start", 0)
    out = _out_dir("export-patterns", opts)
    path = out / "patterns.csv"
    evaluation.export_patterns(params, l, lc, path, (r0, r0 + size), (c0, c0 + size))
    write_manifest(out, "export-patterns", opts, config,
                   {"checkpoint": opts["checkpoint"], "patterns": path}, config.seed)
    print(f"{len(params.la_weights)} layer windows of {size}x{size} -> {path}")


def cmd_select_epsilon(opts: dict) -> None:
    import csv

    splits = data.load_splits(_require(opts, "splits"))
    grid = opts.get("grid", EPSILON_GRID)
    a = graph.build_adjacency(splits.graph)
    rows = graph.epsilon_table(a, grid)
    best = graph.select_epsilon(a, grid)
    out = _out_dir("select-epsilon", opts)
    path = out / "epsilon.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon", "n_cross", "n_direct", "ratio", "selected"])
        for r in rows:
            w.writerow([repr(r["epsilon"]), r["n_cross"], r["n_direct"], repr(r["ratio"]),
                        int(r["epsilon"] == best)])
    write_manifest(out, "select-epsilon", dict(opts, grid=grid), None,
                   {"splits": opts["splits"], "table": path}, None)
    for r in rows:
        mark = "  <-" if r["epsilon"] == best else ""
        print(f"eps {r['epsilon']:<8g} cross {r['n_cross']:>9} direct {r['n_direct']:>8} "
              f"ratio {r['ratio']:.3g}{mark}")


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "analyze-oscillation": cmd_analyze_oscillation,
    "layer-sweep": cmd_layer_sweep,
    "export-patterns": cmd_export_patterns,
    "select-epsilon": cmd_select_epsilon,
}


def _thread_limit():
    raw = os.environ.get("CHPREC_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CHPREC_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("CHPREC_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        first = next((a for a in argv if not a.startswith("-")), None)
        if first is not None and first not in COMMANDS:
            raise UnknownCommand(f"unknown command {first!r}; expected one of {', '.join(COMMANDS)}")
        command, opts = resolve_options(parser, argv)
        logging.basicConfig(level=logging.INFO if opts["verbose"] else logging.WARNING,
                            format="%(message)s")
        with _thread_limit():
            COMMANDS[command](opts)
    except ChprecError as exc:
        print(f"chprec: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, (ConfigError, UnknownCommand)) else 1
    except (OSError, ValueError) as exc:
        print(f"chprec: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    return 0


def main() -> None:
    sys.exit(run())
