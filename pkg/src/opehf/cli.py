"""Command-line entry point: ``opehf {gen-data,run,export-encodings,variance-study,report}``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import pipeline as P

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opehf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_config=True):
        p.add_argument("--config", required=need_config, help="YAML experiment config")
        p.add_argument("--seed", type=int, nargs="+", help="override the config's seed list")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        return p

    common(sub.add_parser("gen-data", help="write datasets and the truth manifest"))
    common(sub.add_parser("run", help="run the full pipeline and write reports"))
    p = common(sub.add_parser("export-encodings", help="write latent encodings as CSV"),
               need_config=False)
    p.add_argument("--model", help="latent model checkpoint (with --dataset)")
    p.add_argument("--dataset", help="dataset file for --model")
    p.add_argument("--output", help="CSV path for --model mode")
    common(sub.add_parser("variance-study", help="PDIS vs trajectory IS variance study"))
    p = sub.add_parser("report", help="print the aggregate table of a finished run")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config", help="unused; accepted for symmetry")
    p.add_argument("--seed", type=int, nargs="+", help="unused; accepted for symmetry")
    return parser


def _config(args) -> P.ExperimentConfig:
    cfg = P.load_config(args.config) if args.config else P.ExperimentConfig()
    if args.seed:
        cfg = replace(cfg, seeds=list(args.seed))
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            print(P.cmd_report(args.out))
            return EXIT_OK
        cfg = _config(args)
        if args.command == "gen-data":
            manifest = P.cmd_gen_data(cfg)
            print(f"wrote {len(manifest['seeds'])} dataset(s) to {cfg.output_dir}")
        elif args.command == "run":
            report = P.cmd_run_pipeline(cfg)
            print(P.format_report(report))
            if report.errors:
                return EXIT_PARTIAL
        elif args.command == "export-encodings":
            if args.model and not args.dataset:
                raise P.ConfigError("--model needs --dataset")
            for path in P.cmd_export_encodings(cfg, model_path=args.model,
                                               dataset_path=args.dataset, output=args.output):
                print(path)
        elif args.command == "variance-study":
            for seed, res in P.cmd_variance_study(cfg).items():
                print(f"seed {seed}: var_pdis={res['var_pdis']:.6g} var_is={res['var_is']:.6g} "
                      f"audit={res['assumption_audit']}")
    except P.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
