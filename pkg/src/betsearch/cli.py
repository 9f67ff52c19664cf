"""Command-line entry point: ``bet <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import plotting
from .backbone import NumericalError, load_model, save_model
from .config import ConfigError, load_config, write_config
from .dataset import (DatasetError, generate_synthetic, load_dataset, load_interactions,
                      save_dataset, split)
from .embedding import EmbeddingFormatError, apply_action, export_sparse, import_sparse
from .metrics import EvaluationError, eval_ensemble
from .predictor import Population, PredictorError
from .sampler import BudgetInfeasible, SizeAction
from .search import derived_seed, pretrain, run_baseline, run_search, selective_retrain

logger = logging.getLogger("betsearch")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
SWEEP_STREAM = 100


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def build_dataset(cfg):
    d = cfg.data
    if d.path:
        if os.path.isdir(d.path):
            return load_dataset(d.path)
        return split(load_interactions(d.path), d.ratios, cfg.data_seed)
    return generate_synthetic(d.num_users, d.num_items, d.interactions, d.popularity_exponent,
                              cfg.data_seed, d.ratios, d.clusters, d.taste,
                              d.activity_exponent)


def _resolve(args, base_dir=None):
    base = None
    if base_dir is not None:
        path = os.path.join(base_dir, "config.json")
        if not os.path.exists(path):
            raise ConfigError(f"{base_dir} has no config.json; is it a pretrain output?")
        base = _read_json(path)
    return load_config(args.config, args.set or (), base)


def _prepare_out(cfg, out):
    os.makedirs(out, exist_ok=True)
    write_config(cfg, os.path.join(out, "config.json"))


def _load_pretrained(model_dir, ds):
    report = _read_json(os.path.join(model_dir, "report.json"))
    return load_model(os.path.join(model_dir, "model"), ds), report["denominator"]


def cmd_synth(args):
    cfg = _resolve(args)
    ds = build_dataset(cfg)
    save_dataset(ds, args.out)
    print(json.dumps({"num_users": ds.num_users, "num_items": ds.num_items,
                      "train": len(ds.train), "val": len(ds.val), "test": len(ds.test)}))


def cmd_pretrain(args):
    cfg = _resolve(args)
    _prepare_out(cfg, args.out)
    ds = build_dataset(cfg)
    log_path = os.path.join(args.out, "train_log.jsonl")
    model, report = pretrain(ds, cfg.search.d_max, cfg.backbone.kind, cfg.backbone.layers,
                             cfg.train, cfg.seed, cfg.metrics.ks)
    with open(log_path, "w") as fh:
        for rec in report.epochs:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    save_model(model, os.path.join(args.out, "model"))
    val = eval_ensemble(model, ds, "val", cfg.metrics.ks)
    if val.ensemble == 0:
        raise NumericalError("pretrained model has zero validation quality")
    out = {"denominator": val.ensemble, "val": val.to_dict(),
           "test": eval_ensemble(model, ds, "test", cfg.metrics.ks).to_dict(),
           "best_epoch": report.best_epoch, "epochs_run": len(report.epochs)}
    _dump(os.path.join(args.out, "report.json"), out)
    if args.plot:
        plotting.plot_training(report.epochs, os.path.join(args.out, "pretrain.svg"))
    print(json.dumps({"denominator": val.ensemble, "best_epoch": report.best_epoch}))


def _final_report(cfg, ds, action, model, extra):
    return {"action": action.summary(),
            "retained": model.table.retained,
            "budget": action.budget,
            "sparsity": model.table.sparsity,
            "val": eval_ensemble(model, ds, "val", cfg.metrics.ks).to_dict(),
            "test": eval_ensemble(model, ds, "test", cfg.metrics.ks).to_dict(),
            **extra}


def search_once(cfg, ds, pretrained, denominator, out_dir, plot=False):
    result = run_search(ds, pretrained, cfg.search, cfg.train, denominator, cfg.metrics.ks,
                        out_dir=out_dir)
    retrain = selective_retrain(result.population, ds, cfg.search, cfg.train,
                                cfg.backbone.kind, cfg.backbone.layers, cfg.metrics.ks)
    report = _final_report(cfg, ds, retrain.action, retrain.model, {
        "finetunes": result.finetunes, "denominator": denominator,
        "retrain_val_ensembles": retrain.val_ensembles,
        "selected_population_rank": retrain.best_index})
    if out_dir is not None:
        result.predictor.save(os.path.join(out_dir, "predictor.betp"))
        _dump(os.path.join(out_dir, "action.json"), retrain.action.to_json())
        save_model(retrain.model, os.path.join(out_dir, "model"))
        if plot:
            plotting.plot_search(result.records, os.path.join(out_dir, "search.svg"))
    return result, retrain, report


def cmd_search(args):
    cfg = _resolve(args, args.model)
    _prepare_out(cfg, args.out)
    ds = build_dataset(cfg)
    pretrained, denominator = _load_pretrained(args.model, ds)
    _, retrain, report = search_once(cfg, ds, pretrained, denominator, args.out, args.plot)
    export = args.export or os.path.join(args.out, "table.bets")
    export_sparse(retrain.model.table, export)
    report["export"] = export
    _dump(os.path.join(args.out, "report.json"), report)
    print(f"final table: {report['retained']} of {ds.num_entities * cfg.search.d_max} "
          f"parameters retained, sparsity {report['sparsity']:.4%} (target >= {cfg.search.c:.2%})")
    print(json.dumps({"val_ensemble": report["val"]["ensemble"],
                      "test_ensemble": report["test"]["ensemble"]}))


def cmd_baseline(args):
    cfg = _resolve(args)
    _prepare_out(cfg, args.out)
    ds = build_dataset(cfg)
    action, model, report = run_baseline(args.kind, ds, cfg.search, cfg.train, cfg.backbone.kind,
                                         cfg.backbone.layers, cfg.metrics.ks)
    out = _final_report(cfg, ds, action, model, {"kind": args.kind, "best_epoch": report.best_epoch})
    _dump(os.path.join(args.out, "action.json"), action.to_json())
    _dump(os.path.join(args.out, "report.json"), out)
    export_sparse(model.table, os.path.join(args.out, "table.bets"))
    print(json.dumps({"kind": args.kind, "sizes": sorted(set(int(x) for x in action.sizes)),
                      "val_ensemble": out["val"]["ensemble"],
                      "test_ensemble": out["test"]["ensemble"]}))


def cmd_evaluate(args):
    cfg = _resolve(args, args.model)
    ds = build_dataset(cfg)
    model = load_model(os.path.join(args.model, "model"), ds)
    if args.table:
        table = import_sparse(args.table)
        if table.num_rows != model.table.num_rows:
            raise ConfigError("table rows do not match the dataset")
        model.table = table
    print(json.dumps(eval_ensemble(model, ds, args.split, cfg.metrics.ks).to_dict(), sort_keys=True))


def cmd_export(args):
    cfg = _resolve(args, args.model)
    ds = build_dataset(cfg)
    model = load_model(os.path.join(args.model, "model"), ds)
    if args.action:
        obj = _read_json(args.action)
        if isinstance(obj, list):
            obj = Population.from_json(obj).entries[args.index][0].to_json()
        apply_action(model.table, SizeAction.from_json(obj))
    export_sparse(model.table, args.out)
    print(f"wrote {args.out}: {os.path.getsize(args.out)} bytes, "
          f"{model.table.retained} retained parameters")


def cmd_sweep(args):
    axis = args.axis
    values = [int(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    base = _resolve(args, args.model)
    _prepare_out(base, args.out)
    ds = build_dataset(base)
    pretrained, denominator = _load_pretrained(args.model, ds)
    rows = []
    for seed_idx in range(args.seeds):
        for value in values:
            cfg = _resolve(args, args.model)
            cfg.set(f"search.{axis}", value)
            # paired: every value of one seed index shares the search seed
            cfg.search.seed = derived_seed(base.seed, SWEEP_STREAM, seed_idx)
            cfg.validate()
            start = time.perf_counter()
            _, _, report = search_once(cfg, ds, pretrained, denominator, None)
            rows.append({"axis": axis, "value": value, "seed": seed_idx,
                         "val_ensemble": report["val"]["ensemble"],
                         "test_ensemble": report["test"]["ensemble"],
                         "recall@20": report["test"]["recall"].get("20"),
                         "ndcg@20": report["test"]["ndcg"].get("20"),
                         "sparsity": report["sparsity"],
                         "seconds": round(time.perf_counter() - start, 2)})
            logger.info("sweep %s=%s seed %d: val %.4f", axis, value, seed_idx,
                        rows[-1]["val_ensemble"])
    path = os.path.join(args.out, "sweep.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    if args.plot:
        plotting.plot_sweep(rows, axis, os.path.join(args.out, "sweep.svg"))
    print(path)


def _common(p):
    p.add_argument("--config", help="JSON file of dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bet", description="Search per-user and per-item embedding sizes under a parameter budget.")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap on BLAS threads used by numpy")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate and save a synthetic dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="train the full-size backbone")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("search", help="run the size search and selective retraining")
    _common(p)
    p.add_argument("--model", required=True, help="pretrain output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--export", help="path of the final BETS file")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("baseline", help="train under a uniform (su) or random (sr) action")
    _common(p)
    p.add_argument("kind", choices=("su", "sr"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="evaluate a saved model or BETS table")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--table", help="BETS file to evaluate in place of the model's table")
    p.add_argument("--split", default="test", choices=("val", "test"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export", help="write a model's masked table as BETS")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--action", help="action.json or population.json to apply first")
    p.add_argument("--index", type=int, default=0, help="population entry when --action is a population")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("sweep", help="search once per value of m or T")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--axis", required=True, choices=("m", "T"))
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))
    np.seterr(over="raise", invalid="raise")
    try:
        args.func(args)
    except BudgetInfeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, DatasetError, EmbeddingFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, PredictorError, EvaluationError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        np.seterr(all="warn")
    return 0


if __name__ == "__main__":
    sys.exit(main())
