"""Command-line interface.

Subcommands: train, score, eval, ablate, synth, inspect. Exit codes:
0 success, 1 configuration error, 2 runtime failure, 3 partial report.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from cance import evaluation
from cance.config import RunConfig, load_config
from cance.data import Dataset, load_csv, load_embeddings, synth_generate, write_csv
from cance.errors import CanceError, ConfigError
from cance.nn.serialize import load_container
from cance.pipeline import (
    ESTIMATOR_FILE,
    REPORT_FILE,
    load_run,
    run_pipeline,
    save_run,
)
from cance.rng import RunRng

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CANCE_OUTPUT_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_PARTIAL = 3


def _resolve_outdir(explicit: str, config: RunConfig) -> str:
    if explicit:
        return explicit
    if config.output.dir:
        return config.output.dir
    root = os.environ.get(OUTPUT_ROOT_ENV, "cance-runs")
    name = config.dataset.name or config.dataset.kind
    return os.path.join(root, f"{name}-{config.hash()}")


def write_scores(path, scores, z_e=None, z_c=None) -> None:
    """Deterministic score CSV: id, z_e, z_c, score."""
    scores = np.asarray(scores, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "z_e", "z_c", "score"])
        for i, s in enumerate(scores):
            row = [str(i)]
            row.append(repr(float(z_e[i])) if z_e is not None else "")
            row.append(repr(float(z_c[i])) if z_c is not None else "")
            row.append(repr(float(s)))
            writer.writerow(row)


def _load_input(path, ignore_columns) -> Dataset:
    if path.endswith(".emb"):
        return load_embeddings(path)
    with open(path) as fh:
        header = fh.readline().strip()
        has_rows = bool(fh.readline().strip())
    columns = [h.strip() for h in header.split(",")] if header else []
    features = [c for c in columns if c not in ignore_columns]
    if not features or not has_rows:
        return Dataset(np.empty((0, len(features))))
    return load_csv(path, feature_columns=features)


def cmd_train(args) -> int:
    config = load_config(args.config, args.set or ())
    outdir = _resolve_outdir(args.outdir, config)
    artifacts = run_pipeline(config, config.eval.seed)
    save_run(outdir, config, artifacts)
    est = artifacts.estimator_history
    print(f"artifacts written to {outdir}")
    print(f"config hash      {artifacts.config_hash}")
    comp = artifacts.compression_history
    if comp.get("method") == "ae":
        print(f"ae val loss      stage1 {comp['stage1_val'][-1]:.6g}  "
              f"stage2 {comp['stage2_val'][-1]:.6g}")
    print(f"nce best val     {est['best_val_loss']:.6g}")
    return EXIT_OK


def cmd_score(args) -> int:
    compression, estimator, normalizer, _ = load_run(args.model_dir)
    ignore = set(filter(None, (args.ignore_columns or "label,class").split(",")))
    dataset = _load_input(args.input, ignore)
    if dataset.n == 0:
        write_scores(args.output, np.empty(0))
        print(f"0 rows scored -> {args.output}")
        return EXIT_OK
    if dataset.dim != compression.input_dim:
        raise ConfigError(
            f"input has {dataset.dim} features, model expects "
            f"{compression.input_dim}"
        )
    z = compression.composite(normalizer.transform(dataset).features)
    scores = estimator.score(z)
    write_scores(args.output, scores, z_e=z[:, -2], z_c=z[:, -1])
    print(f"{dataset.n} rows scored -> {args.output}")
    return EXIT_OK


def _print_report(report_summary: dict) -> None:
    mean = report_summary["mean"]
    std = report_summary["std"]
    keys = sorted(mean)
    name = report_summary["name"]
    print(f"{name}: " + "  ".join(
        f"{k} {mean[k]:.4f} +/- {std[k]:.4f}" for k in keys
    ))


def _score_persister(outdir, prefix=""):
    def persist(seed, artifacts):
        z = artifacts.compression.composite(
            artifacts.normalizer.transform(artifacts.test).features
        )
        write_scores(
            os.path.join(outdir, f"scores-{prefix}seed{seed}.csv"),
            artifacts.test_scores,
            z_e=z[:, -2],
            z_c=z[:, -1],
        )

    return persist


def cmd_eval(args) -> int:
    config = load_config(args.config, args.set or ())
    outdir = _resolve_outdir(args.outdir, config)
    os.makedirs(outdir, exist_ok=True)

    sweep = (config.dataset.benchmark == "unimodal"
             and len(config.dataset.normal_classes) > 1)
    if sweep:
        reports = evaluation.run_unimodal_sweep(
            config,
            on_run_factory=lambda cls: _score_persister(
                outdir, prefix=f"class{cls}-"
            ),
        )
        summary = {str(cls): r.summary() for cls, r in reports.items()}
        partial = any(r.partial for r in reports.values())
        for cls in sorted(reports):
            _print_report(summary[str(cls)])
        aurocs = [r.mean("auroc") for r in reports.values()]
        print(f"average auroc over classes: {np.mean(aurocs):.4f}")
    else:
        report = evaluation.run_experiment(
            config, on_run=_score_persister(outdir)
        )
        summary = report.summary()
        partial = report.partial
        print(f"seeds: {', '.join(str(s) for s in report.seeds)}")
        _print_report(summary)
    with open(os.path.join(outdir, "report.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"report written to {os.path.join(outdir, 'report.json')}")
    return EXIT_PARTIAL if partial else EXIT_OK


def cmd_ablate(args) -> int:
    config = load_config(args.config, args.set or ())
    outdir = _resolve_outdir(args.outdir, config)
    os.makedirs(outdir, exist_ok=True)
    reports = evaluation.run_ablation(config)
    summaries = {variant: r.summary() for variant, r in reports.items()}
    with open(os.path.join(outdir, "ablation.json"), "w") as fh:
        json.dump(summaries, fh, indent=2, sort_keys=True)
        fh.write("\n")
    partial = False
    for variant in evaluation.ABLATION_VARIANTS:
        _print_report(summaries[variant])
        partial = partial or reports[variant].partial
    print(f"report written to {os.path.join(outdir, 'ablation.json')}")
    return EXIT_PARTIAL if partial else EXIT_OK


def cmd_synth(args) -> int:
    rng = RunRng(args.seed)
    dataset = synth_generate(args.spec, rng.stream("synth"))
    write_csv(args.output, dataset)
    anomalies = int(dataset.labels.sum()) if dataset.labels is not None else 0
    print(f"{dataset.n} rows ({anomalies} anomalies) -> {args.output}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    compression, estimator, normalizer, config_hash = load_run(args.model_dir)
    print(f"config hash      {config_hash}")
    print(f"compression      {type(compression).__name__} "
          f"{compression.input_dim} -> {compression.latent_dim}")
    print(f"normalization    {normalizer.method}")
    noise = estimator.noise
    np.set_printoptions(precision=4, suppress=True)
    print(f"noise-sample ratio  {noise.nu}")
    print(f"noise mean       {noise.base.mean}")
    print(f"noise cov diag   {np.diag(noise.base.cov)}")
    print(f"K diagonal       {noise.k_diag()}")
    _, est_meta, _ = load_container(os.path.join(args.model_dir,
                                                 ESTIMATOR_FILE))
    if est_meta.get("augmentation"):
        print(f"mode estimates   {est_meta['augmentation']}")
    report_path = os.path.join(args.model_dir, REPORT_FILE)
    if os.path.exists(report_path):
        with open(report_path) as fh:
            report = json.load(fh)
        prop = report.get("estimator", {}).get("augmentation_margins")
        if prop:
            print(f"augmentation margins  {prop}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cance",
        description="Anomaly detection by contrastive density estimation "
        "over compression features.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("-c", "--config", help="INI config file")
        p.add_argument(
            "--set", action="append", metavar="SECTION.KEY=VALUE",
            help="override a config value",
        )
        p.add_argument("-o", "--outdir", default="", help="output directory")

    p = sub.add_parser("train", help="fit compression and estimator, persist")
    add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score rows with persisted models")
    p.add_argument("-m", "--model-dir", required=True)
    p.add_argument("-i", "--input", required=True, help="csv or .emb file")
    p.add_argument("-o", "--output", required=True, help="score csv to write")
    p.add_argument("--ignore-columns", default="label,class")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="repeated-run experiment with a report")
    add_config_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the four-variant ablation")
    add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="generate a synthetic dataset csv")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="print fitted model diagnostics")
    p.add_argument("-m", "--model-dir", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
