"""Command-line entry points.

Subcommands: stats, cluster, run, predict, evaluate, verify-theorem,
shortlist-recall.  Exit codes: 0 success, 2 configuration error,
3 data/format error, 4 numeric failure (non-finite loss or a violated
bound).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import bounds, pipeline
from .clustering import build_cluster_tree, compute_centroids, estimate_correlation
from .data import compute_stats, parse_xc_file
from .errors import ConfigError, DataError, NumericError, XcpipeError
from .metrics import evaluate
from .predictor import (
    PredictConfig,
    predict_batch,
    predictions_from_wire,
    predictions_to_wire,
)
from .shortlist import RouteCaps, Shortlist, shortlist_recall


def _load_dataset(path):
    with open(path, "rb") as f:
        d, dedup = parse_xc_file(f)
    if dedup:
        print(f"note: {dedup} duplicate label entries dropped", file=sys.stderr)
    return d


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value (dotted path)")
    p.add_argument("--print-config", action="store_true",
                   help="print the effective config and exit")
    p.add_argument("--threads", type=int, default=1,
                   help="advisory worker count (this build runs "
                        "single-threaded; recorded for compatibility)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded bit-reproducible mode (the default "
                        "behavior of this build)")


def _effective_config(args):
    cfg = pipeline.load_config(getattr(args, "config", None),
                               getattr(args, "set", []))
    if getattr(args, "print_config", False):
        print(json.dumps(cfg, indent=2, sort_keys=True))
        raise SystemExit(0)
    return cfg


def cmd_stats(args):
    d = _load_dataset(args.data)
    print(json.dumps(compute_stats(d).to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_cluster(args):
    cfg = _effective_config(args)
    d = _load_dataset(args.data)
    centroids, zero_rows = compute_centroids(d)
    corr = None
    if cfg["surrogate"]["use_correlation"]:
        corr = estimate_correlation(d, cfg["surrogate"]["walks_per_label"],
                                    cfg["surrogate"]["walk_length"],
                                    cfg["seed"])
    non_empty = d.num_labels - zero_rows.size
    target = min(cfg["surrogate"]["num_meta_labels"], non_empty)
    tree = build_cluster_tree(centroids, target, cfg["seed"], corr=corr,
                              empty_labels=zero_rows)
    text = tree.to_json()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        print(f"wrote {target} clusters to {args.out}", file=sys.stderr)
    else:
        print(text)
    return 0


def cmd_run(args):
    cfg = _effective_config(args)
    train_d = _load_dataset(args.train)
    test_d = _load_dataset(args.test) if args.test else None
    stages = args.stages.split(",") if args.stages else None
    bundle = pipeline.run(cfg, train_d, args.out, stages=stages,
                          ablate_sampler=args.ablate_sampler, test_d=test_d,
                          log_fn=lambda m: print(m, file=sys.stderr))
    if test_d is not None and "test_report" in bundle.manifest:
        print(json.dumps(bundle.manifest["test_report"], indent=2,
                         sort_keys=True))
    return 0


def cmd_predict(args):
    cfg_path_bundle, cfg = pipeline.load_bundle(args.bundle)
    if args.config or args.set:
        cfg = pipeline.load_config(args.config, args.set)
    test_d = _load_dataset(args.data)
    pcfg = PredictConfig(alpha=cfg["predict"]["alpha"],
                         beta=cfg["predict"]["beta"],
                         top_k=args.top_k or cfg["predict"]["top_k"],
                         ef_search=cfg["predict"]["ef_search"])
    state = cfg_path_bundle.predictor_state(cfg)
    if state.reranker is None and cfg["predict"]["beta"] < 1.0:
        print("note: no re-ranker in bundle; beta ignored", file=sys.stderr)
    preds, report = predict_batch(test_d, state, pcfg)
    short_rows = sum(1 for p in preds if p.labels.size < pcfg.top_k)
    if short_rows:
        print(f"note: {short_rows} rows shorter than top_k "
              "(shortlist smaller)", file=sys.stderr)
    text = predictions_to_wire(preds, test_d.num_labels)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    print(json.dumps(report), file=sys.stderr)
    return 0


def cmd_evaluate(args):
    cfg = _effective_config(args)
    truth = _load_dataset(args.truth)
    train_d = _load_dataset(args.train)
    with open(args.pred) as f:
        preds, num_labels = predictions_from_wire(f.read())
    if num_labels != truth.num_labels:
        raise DataError(
            f"prediction file covers {num_labels} labels, truth has "
            f"{truth.num_labels}")
    report = evaluate(preds, truth, train_d,
                      propensity_a=cfg["metrics"]["propensity_a"],
                      propensity_b=cfg["metrics"]["propensity_b"],
                      quantile_bins=cfg["metrics"]["quantile_bins"])
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_verify_theorem(args):
    cfg = _effective_config(args)
    lambdas = tuple(float(x) for x in args.lambdas.split(","))
    if args.bundle:
        bundle, bcfg = pipeline.load_bundle(args.bundle)
        model = bundle.cache.get("extreme_model")
        if model is None:
            raise ConfigError("bundle has no trained extreme stage")
        d = _load_dataset(args.data)
        report = bounds.check_model_bounds(
            model.embeddings, model.residual.matrix, model.residual.lam, d)
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0
    report = bounds.run_randomized_suite(
        args.instances, lambdas=lambdas, dim=args.dim, seed=cfg["seed"])
    rows = report.pop("rows")
    for row in rows[:args.sample_rows]:
        print(json.dumps(row))
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_shortlist_recall(args):
    truth = _load_dataset(args.data)
    with open(args.shortlist) as f:
        sl = Shortlist.from_wire(f.read())
    print(json.dumps(shortlist_recall(sl, truth), indent=2, sort_keys=True))
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="xcpipe",
        description="extreme multi-label short-text classification pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("stats", help="dataset statistics as JSON")
    sp.add_argument("data")
    sp.set_defaults(fn=cmd_stats)

    sp = sub.add_parser("cluster", help="build the label cluster tree")
    sp.add_argument("data")
    sp.add_argument("--out")
    _add_common(sp)
    sp.set_defaults(fn=cmd_cluster)

    sp = sub.add_parser("run", help="execute pipeline stages into a bundle")
    sp.add_argument("--train", required=True)
    sp.add_argument("--test")
    sp.add_argument("--out", required=True, help="bundle directory")
    sp.add_argument("--stages",
                    help="comma list, a prefix of "
                         "surrogate,shortlist,extreme,rerank")
    sp.add_argument("--ablate-sampler",
                    choices=["anns", "uniform", "unigram"],
                    help="swap the negative sampler for ablations")
    _add_common(sp)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("predict", help="batch predictions from a bundle")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out")
    sp.add_argument("--top-k", type=int, default=0)
    _add_common(sp)
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("evaluate", help="score a prediction file")
    sp.add_argument("--truth", required=True)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--train", required=True,
                    help="training file (propensity frequencies)")
    _add_common(sp)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("verify-theorem",
                        help="check the drift/cosine bounds")
    sp.add_argument("--bundle", help="check a trained bundle")
    sp.add_argument("--data", help="dataset for bundle mode")
    sp.add_argument("--instances", type=int, default=100000)
    sp.add_argument("--dim", type=int, default=8)
    sp.add_argument("--lambdas", default="0.1,0.3,0.5,1.0")
    sp.add_argument("--sample-rows", type=int, default=100)
    _add_common(sp)
    sp.set_defaults(fn=cmd_verify_theorem)

    sp = sub.add_parser("shortlist-recall",
                        help="recall/overlap report for a shortlist file")
    sp.add_argument("--shortlist", required=True)
    sp.add_argument("--data", required=True)
    _add_common(sp)
    sp.set_defaults(fn=cmd_shortlist_recall)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except XcpipeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
