"""Command-line interface: ``stosa <subcommand> [options]``.

Every subcommand exits 0 on success. Failures print a single JSON object
``{"error": <kind>, "message": <text>}`` on stderr and exit nonzero (2 for
usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import ConfigError, RunConfig
from .evaluation import (bucketed_metrics, evaluate, relative_improvement, user_buckets_by_length,
                         user_buckets_by_test_popularity, write_ranks_csv)
from .embeddings import activate_covariance
from .model import STOSA, encode, init_params, load_checkpoint, predict_scores, save_checkpoint, top_n
from .synthetic import cyclic_interactions
from .training import gradient_check, train, training_windows

log = logging.getLogger("stosa")

DEFAULT_POPULARITY_EDGES = (0, 4, 8, math.inf)
BUCKET_AXES = ("sequence-length", "item-popularity")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# configuration flags
# ---------------------------------------------------------------------------

# flag -> (RunConfig field, argparse kwargs)
_CONFIG_FLAGS = {
    "--manifest": ("manifest", {"type": str}),
    "--variant": ("variant", {"choices": ("stosa", "dot")}),
    "--d": ("d", {"type": int}),
    "--n": ("n", {"type": int}),
    "--layers": ("n_layers", {"type": int}),
    "--heads": ("n_heads", {"type": int}),
    "--dropout": ("dropout", {"type": float}),
    "--normalization": ("normalization", {"choices": ("softmax", "paper-ratio")}),
    "--lr": ("lr", {"type": float}),
    "--beta": ("beta", {"type": float}),
    "--lam": ("lam", {"type": float}),
    "--batch-size": ("batch_size", {"type": int}),
    "--seed": ("seed", {"type": int}),
    "--patience": ("patience", {"type": int}),
    "--max-epochs": ("max_epochs", {"type": int}),
    "--eval-ns": ("eval_ns", {"type": int, "nargs": "+"}),
    "--dtype": ("dtype", {"choices": ("float32", "float64")}),
    "--attention-dropout": ("attention_dropout", {"action": argparse.BooleanOptionalAction}),
    "--attention-residual": ("attention_residual", {"action": argparse.BooleanOptionalAction}),
    "--rank-all": ("rank_all", {"action": argparse.BooleanOptionalAction}),
    "--allow-deviation": ("allow_deviation", {"action": argparse.BooleanOptionalAction}),
}


def _add_config_flags(p):
    p.add_argument("--config", help="flat JSON file with RunConfig fields; flags override it")
    for flag, (dest, kw) in _CONFIG_FLAGS.items():
        p.add_argument(flag, dest=f"cfg_{dest}", default=None, **kw)


def config_from_args(args, config_path=None):
    """Merge a config file (if any) with explicit flag overrides and check ranges."""
    path = config_path if config_path is not None else getattr(args, "config", None)
    cfg = RunConfig.load(path) if path else RunConfig()
    overrides = {dest: getattr(args, f"cfg_{dest}") for dest, _ in _CONFIG_FLAGS.values()
                 if getattr(args, f"cfg_{dest}", None) is not None}
    if overrides:
        cfg = cfg.replace(**overrides)
    cfg.check_ranges()
    return cfg


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_dataset(path):
    if not path:
        raise ConfigError("no manifest given (use --manifest or set it in the config)")
    return D.read_manifest(path)


def _user_id(dataset, name):
    try:
        return dataset.user_index[name]
    except KeyError:
        raise KeyError(f"unknown user {name!r}") from None


def _bucket_assignment(dataset, axis, edges, split="test"):
    if axis == "sequence-length":
        if edges is None:
            edges = D.quartile_edges([len(dataset.train(u)) for u in dataset.user_ids()])
        return user_buckets_by_length(dataset, edges), edges
    if edges is None:
        edges = list(DEFAULT_POPULARITY_EDGES)
    return user_buckets_by_test_popularity(dataset, edges, split), edges


def _parse_edges(text):
    if text is None:
        return None
    edges = [math.inf if e.strip() in ("inf", "+inf") else float(e) for e in text.split(",")]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"bucket edges must be strictly increasing: {text!r}")
    return edges


def _edges_json(edges):
    return [None if math.isinf(e) else e for e in edges]


def run_evaluation(params, dataset, split, ns, rank_all, bucket_axes=(), edges=None):
    """Evaluate and attach bucketed sub-reports; returns the JSON-ready dict."""
    report = evaluate(params, dataset, split, ns=ns, rank_all=rank_all)
    out = {"split": split, "rank_all": rank_all, **report.to_dict()}
    if bucket_axes:
        out["buckets"] = {}
        for axis in bucket_axes:
            assignment, used = _bucket_assignment(dataset, axis, edges, split)
            groups = bucketed_metrics(report.per_user_rank, assignment, len(used) - 1, ns)
            out["buckets"][axis] = {
                "edges": _edges_json(used),
                "groups": [None if r is None else {**r.to_dict(), "bucket": b}
                           for b, r in sorted(groups.items())],
            }
    return report, out


def _metric_deltas(a, b):
    """Differences and relative improvement (percent) of report ``a`` over ``b``."""
    out = {"mrr": {"a": a["mrr"], "b": b["mrr"], "delta": a["mrr"] - b["mrr"],
                   "improvement_pct": relative_improvement(a["mrr"], b["mrr"])}}
    for metric in ("recall", "ndcg"):
        for n, va in a[metric].items():
            vb = b[metric][n]
            out[f"{metric}@{n}"] = {"a": va, "b": vb, "delta": va - vb,
                                    "improvement_pct": relative_improvement(va, vb)}
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_prepare(args):
    parsed = D.read_interactions(args.input)
    kept = D.k_core_filter(parsed.interactions, args.k, iterative=args.iterative)
    dataset = D.build_sequences(kept)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_manifest(dataset, out / "manifest.tsv")
    stats = {**dataset.stats(), "k": args.k, "iterative": args.iterative,
             "raw_interactions": len(parsed.interactions), "malformed_lines": parsed.n_malformed}
    _write_json(stats, out / "stats.json")
    if dataset.n_users == 0:
        log.warning("no user survived %d-core filtering; the manifest is empty", args.k)
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_train(args):
    cfg = config_from_args(args)
    dataset = _load_dataset(cfg.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(dataset, cfg, log_path=out / "train_log.jsonl")
    extra = {"run_config": cfg.to_dict(), "best_epoch": result.best_epoch,
             "best_val_mrr": result.best_val_mrr, "status": result.status,
             "epochs_run": len(result.log)}
    save_checkpoint(result.params, out / "checkpoint.npz", extra)
    _write_json(cfg.to_dict(), out / "config.json")
    summary = {"checkpoint": str(out / "checkpoint.npz"), **{k: v for k, v in extra.items()
                                                             if k != "run_config"}}
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args):
    params, extra = load_checkpoint(args.checkpoint)
    run = extra.get("run_config", {})
    dataset = _load_dataset(args.manifest or run.get("manifest"))
    ns = args.ns or run.get("eval_ns", [1, 5])
    rank_all = args.rank_all if args.rank_all is not None else run.get("rank_all", False)
    report, out = run_evaluation(params, dataset, args.split, ns, rank_all, args.buckets,
                                 _parse_edges(args.edges))
    if args.out:
        _write_json(out, args.out)
    if args.ranks_csv:
        write_ranks_csv(report, args.ranks_csv, dataset)
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_compare(args):
    reports = {}
    for side, path in (("a", args.config_a), ("b", args.config_b)):
        cfg = config_from_args(args, path)
        dataset = _load_dataset(cfg.manifest)
        result = train(dataset, cfg)
        _, reports[side] = run_evaluation(result.params, dataset, "test", cfg.eval_ns,
                                          cfg.rank_all, args.buckets, _parse_edges(args.edges))
        reports[side]["variant"] = cfg.variant
        reports[side]["best_epoch"] = result.best_epoch
    a, b = reports["a"], reports["b"]
    comparison = {"a": a, "b": b, "overall": _metric_deltas(a, b)}
    if args.buckets:
        comparison["buckets"] = {}
        for axis in args.buckets:
            rows = []
            for ga, gb in zip(a["buckets"][axis]["groups"], b["buckets"][axis]["groups"]):
                rows.append(None if ga is None or gb is None else _metric_deltas(ga, gb))
            comparison["buckets"][axis] = {"edges": a["buckets"][axis]["edges"], "groups": rows}
    if args.out:
        _write_json(comparison, args.out)
    print(json.dumps(comparison, sort_keys=True))
    return 0


def cmd_recommend(args):
    params, extra = load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.manifest or extra.get("run_config", {}).get("manifest"))
    u = _user_id(dataset, args.user)
    history = dataset.sequence(u)
    window = D.make_input_window(history, params.config.n)
    scores = predict_scores(params, window[None])[0]
    exclude = set() if args.include_seen else set(history.tolist())
    for rank, item in enumerate(top_n(scores, args.top, exclude), start=1):
        print(json.dumps({"rank": rank, "item": dataset.items[item - 1], "item_id": item,
                          "score": float(scores[item])}, sort_keys=True))
    return 0


def _export_attention(params, dataset, user, out):
    u = _user_id(dataset, user)
    window = D.make_input_window(dataset.sequence(u), params.config.n)
    _, attn = encode(params, window[None])
    written = []
    for layer, w in enumerate(attn):
        weights = np.asarray(w.data)[0]  # (H, n, n)
        for head in range(weights.shape[0]):
            path = out / f"attention_layer{layer}_head{head}.csv"
            np.savetxt(path, weights[head], delimiter=",", fmt="%.10g")
            written.append(str(path))
    return written


def _export_embeddings(params, dataset, out):
    a = params.arrays
    path = out / "embeddings.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if params.variant == STOSA:
            mean = a["item_mean"][1:]
            cov = activate_covariance(a["item_cov"][1:].astype(np.float64))
            dh = mean.shape[1]
            w.writerow(["item_id", "item"] + [f"mean_{i}" for i in range(dh)]
                       + [f"cov_{i}" for i in range(dh)])
            rows = np.concatenate([mean, cov], axis=1)
        else:
            rows = a["item_emb"][1:]
            w.writerow(["item_id", "item"] + [f"emb_{i}" for i in range(rows.shape[1])])
        for i, row in enumerate(rows, start=1):
            w.writerow([i, dataset.items[i - 1]] + [f"{x:.10g}" for x in row])
    return [str(path)]


def cmd_export(args):
    params, extra = load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.manifest or extra.get("run_config", {}).get("manifest"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "attention":
        if not args.user:
            raise UsageError("export attention needs --user")
        written = _export_attention(params, dataset, args.user, out)
    else:
        written = _export_embeddings(params, dataset, out)
    print(json.dumps({"written": written}))
    return 0


def cmd_gradcheck(args):
    cfg = RunConfig(variant=args.variant, d=args.d, n=args.n, n_layers=args.layers,
                    n_heads=args.heads, dropout=0.0, seed=args.seed, dtype="float64",
                    allow_deviation=True)
    if args.manifest:
        dataset = D.read_manifest(args.manifest)
    else:
        dataset = D.build_sequences(cyclic_interactions(n_users=args.users, n_items=args.n + 5,
                                                        lengths=(args.n, args.n + 3),
                                                        seed=args.seed))
    params = init_params(cfg.model_config(), dataset.n_items, cfg.rng("init"), np.float64)
    users, windows = training_windows(dataset, cfg.n)
    users, windows = users[:args.users], D.TrainingWindow(windows.inputs[:args.users],
                                                          windows.targets[:args.users],
                                                          windows.mask[:args.users])
    negatives = D.sample_negatives(dataset, users, windows.mask, cfg.rng("negatives"))
    results = {}
    for lam in args.lam:
        errs = gradient_check(params, windows, negatives, lam, args.beta, h=args.h)
        results[str(lam)] = {"max_rel_error": max(errs.values()), "per_array": errs}
    worst = max(r["max_rel_error"] for r in results.values())
    out = {"tolerance": args.tol, "passed": worst < args.tol, "max_rel_error": worst,
           "by_lambda": results}
    print(json.dumps(out, sort_keys=True))
    return 0 if out["passed"] else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="stosa", allow_abbrev=False,
                     description="Stochastic-embedding sequential recommender.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", allow_abbrev=False,
                       help="filter a raw TSV log and write a split manifest")
    p.add_argument("input", help="TSV file: user<TAB>item<TAB>timestamp")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int, default=5, help="minimum interactions per user")
    p.add_argument("--iterative", action="store_true",
                   help="alternate user and item filtering until stable")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", allow_abbrev=False, help="train a model")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    def eval_flags(q):
        q.add_argument("--buckets", nargs="+", choices=BUCKET_AXES, default=[],
                       help="bucketed breakdowns to add")
        q.add_argument("--edges", help="comma-separated bucket edges, e.g. 0,4,8,inf")
        q.add_argument("--out", help="write the JSON report here")

    p = sub.add_parser("eval", allow_abbrev=False, help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", choices=("test", "valid"), default="test")
    p.add_argument("--ns", type=int, nargs="+")
    p.add_argument("--rank-all", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--ranks-csv", help="write per-user ranks as CSV")
    eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", allow_abbrev=False,
                       help="train two configurations and compare test metrics")
    _add_config_flags(p)
    p.add_argument("--config-a", required=True)
    p.add_argument("--config-b", required=True)
    eval_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("recommend", allow_abbrev=False, help="print top-N items for a user")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--user", required=True, help="user id as it appears in the raw log")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--include-seen", action="store_true")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("export", allow_abbrev=False, help="export attention maps or embeddings")
    p.add_argument("what", choices=("attention", "embeddings"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--user")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", allow_abbrev=False,
                       help="compare analytic gradients with finite differences")
    p.add_argument("--variant", choices=("stosa", "dot"), default="stosa")
    p.add_argument("--manifest")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--users", type=int, default=3)
    p.add_argument("--lam", type=float, nargs="+", default=[0.0, 0.5])
    p.add_argument("--beta", type=float, default=1e-3)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _fail(kind, message, code):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except ConfigError as exc:
        return _fail("config", str(exc), 2)
    except (OSError, D.IngestionError, D.DatasetError) as exc:
        return _fail("io", str(exc), 1)
    except Exception as exc:  # noqa: BLE001 - every failure must surface as JSON
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
