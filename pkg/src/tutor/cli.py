"""Command-line entry point: `tutor <verb> --config cfg.json [--seed N] [--out DIR]`."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, TestLeakage, TutorError
from .pipeline import (
    ExperimentConfig, Pipeline, run_compression_sweep, run_full, run_pca_sweep, run_privacy,
)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("tutor")


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _load_config(args) -> ExperimentConfig:
    if not getattr(args, "config", None):
        raise ConfigError("--config is required")
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    return cfg


def _pipeline(args):
    cfg = _load_config(args)
    return cfg, Pipeline.from_config(cfg, cfg.output_dir)


def cmd_fit_density(args):
    cfg, p = _pipeline(args)
    from .density import model_to_json

    fp = p.splits.schema.fingerprint()
    for m, model in p.densities().items():
        _write(Path(cfg.output_dir) / "densities" / f"{m}.json", model_to_json(model, fp) + "\n")
        print(f"{m}: fitted")


def cmd_train_forest(args):
    cfg, p = _pipeline(args)
    kb, integ = p.forests()
    out = Path(cfg.output_dir) / "forests"
    _write(out / "kb.json", kb.to_json() + "\n")
    _write(out / "kb_rules.txt", kb.dump_rules(p.splits.schema))
    _write(out / "integrity.json", json.dumps([c.to_dict() for c in integ], sort_keys=True) + "\n")
    print(f"{kb.identity} validation accuracy {kb.validation_accuracy:.4f}; {len(integ)} integrity classifiers")


def cmd_generate(args):
    cfg = _load_config(args)
    if args.count is not None:
        cfg.synthetic_count = args.count
    p = Pipeline.from_config(cfg, cfg.output_dir)
    from .tabular import write_csv

    for m, b in p.batches().items():
        out = Path(cfg.output_dir) / "synthetic"
        out.mkdir(parents=True, exist_ok=True)
        write_csv(b.data, out / f"{m}.csv")
        _write(out / f"{m}.meta.json", json.dumps(b.metadata(), sort_keys=True, indent=1) + "\n")
        print(f"{m}: kept {b.retained_count}/{b.requested_count}")


def cmd_baseline(args):
    cfg, p = _pipeline(args)
    base = p.baseline()
    _write(Path(cfg.output_dir) / "models" / "dnn1.json", base["net"].to_json())
    _write(Path(cfg.output_dir) / "baseline.json",
           json.dumps({k: v for k, v in base.items() if k != "net"}, sort_keys=True, indent=1) + "\n")
    print(f"hidden {base['hidden']} validation accuracy {base['val_accuracy']:.4f}")


def cmd_scheme(args):
    cfg, p = _pipeline(args)
    names = ["A", "B"] if args.scheme == "both" else [args.scheme]
    for n in names:
        r = p.scheme(n)
        _write(Path(cfg.output_dir) / f"scheme_{n.lower()}.json", json.dumps(r.to_dict(), sort_keys=True, indent=1) + "\n")
        _write(Path(cfg.output_dir) / "models" / f"scheme_{n.lower()}.json", r.model.to_json())
        print(f"scheme {n}: {r.method} validation accuracy {r.val_accuracy:.4f}")


def cmd_growprune(args):
    cfg, p = _pipeline(args)
    d3 = p.dnn3()
    _write(Path(cfg.output_dir) / "models" / "dnn3.json", d3["net"].to_json())
    _write(Path(cfg.output_dir) / "growprune_trace.jsonl",
           "".join(json.dumps(r, sort_keys=True) + "\n" for r in d3["trace"]))
    print(f"iteration {d3['best_iteration']} validation accuracy {d3['val_accuracy']:.4f}, "
          f"{d3['net'].param_count()} params")


def cmd_run_full(args):
    cfg = _load_config(args)
    rep = run_full(cfg)
    _write(Path(cfg.output_dir) / "growprune_trace.jsonl",
           "".join(json.dumps(r, sort_keys=True) + "\n" for r in rep["growprune_trace"]))
    for k in ("dnn1", "dnn2", "dnn3", "random_forest"):
        m = rep["models"][k]
        print(f"{k}: accuracy {m['accuracy']:.4f}" + (f", {m['params']} params" if "params" in m else ""))


def _ratios(args):
    return [float(r) for r in args.ratios.split(",")] if args.ratios else None


def cmd_sweep_compression(args):
    cfg = _load_config(args)
    rep = run_compression_sweep(cfg, _ratios(args))
    for r in rep["curve"]:
        print(f"ratio {r['ratio']:g} {r['model']}: {r['accuracy']:.4f}")


def cmd_sweep_pca(args):
    cfg = _load_config(args)
    rep = run_pca_sweep(cfg, _ratios(args))
    for r in rep["curve"]:
        print(f"ratio {r['ratio']:g} {r['model']}: {r['accuracy']:.4f}")


def cmd_privacy_export(args):
    cfg = _load_config(args)
    if args.count is not None:
        cfg.privacy = {**cfg.privacy, "count": args.count}
    rep = run_privacy(cfg)
    for m, r in rep["methods"].items():
        print(f"{m}: {r['rows']} rows, synthetic-only test accuracy {r['test_accuracy']:.4f}")


def cmd_prepare_breast_cancer(args):
    from .datasets import prepare_breast_cancer

    paths = prepare_breast_cancer(args.data_dir, seed=args.split_seed)
    for k, v in paths.items():
        print(f"{k}: {v}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment config JSON")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="tutor", parents=[common],
                                     description="Synthetic-data-assisted training and grow-and-prune synthesis.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    verb("fit-density", cmd_fit_density, "fit MND, GMM and KDE models on the train split")
    verb("train-forest", cmd_train_forest, "train the labeling forest and integrity classifiers")
    verb("generate", cmd_generate, "generate verified, labeled synthetic data").add_argument("--count", type=int)
    verb("baseline", cmd_baseline, "search the FC baseline (DNN 1)")
    verb("scheme", cmd_scheme, "run training scheme A, B or both").add_argument(
        "--scheme", choices=["A", "B", "both"], default="both")
    verb("growprune", cmd_growprune, "grow-and-prune the better scheme model (DNN 3)")
    verb("run-full", cmd_run_full, "run every stage and write the report")
    verb("sweep-compression", cmd_sweep_compression, "rerun on subsampled train/validation data").add_argument(
        "--ratios", help="comma-separated compression ratios")
    verb("sweep-pca", cmd_sweep_pca, "rerun on PCA-reduced features").add_argument(
        "--ratios", help="comma-separated PCA compression ratios")
    verb("privacy-export", cmd_privacy_export, "export synthetic data and train on it alone").add_argument(
        "--count", type=int)
    p = verb("prepare-breast-cancer", cmd_prepare_breast_cancer, "write the Breast Cancer splits as CSV")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split-seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (ConfigError, TestLeakage) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TutorError as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
