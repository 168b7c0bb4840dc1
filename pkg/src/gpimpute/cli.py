"""Command-line interface.

Subcommands:
  generate    write synthetic windows as CSV files
  preprocess  hourly-discretise a raw observation CSV
  run         run a benchmark experiment from a JSON config
  report      re-aggregate a long-format results CSV
  inspect     pretty-print a saved emulator manifest

The run config is a JSON object; every key is optional and CLI flags override
it. Schema (defaults in parentheses):

  {
    "mode": "predict-output" | "impute-covariates",
    "methods": ["locf", "mice", "gp", "lgp", "dgpsi"],
    "proportions": [0.1, 0.2, 0.3, 0.4],
    "n_windows": 14,
    "seed": 0,
    "whole_row_masking": false,
    "synthetic": {... SyntheticConfig fields ...},
    "fit": {"n_starts": 5, "seed": 0, "max_iter": 200},
    "sem": {"iterations": ..., "burn_in": ..., "ess_sweeps": ...,
            "n_imputations": ...},
    "mice": {"n_imputations": 5, "cycles": 10}
  }
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .baselines import MICEConfig
from .data import (
    ROLE_COVARIATE,
    ROLE_OUTPUT,
    SyntheticConfig,
    discretise_hourly,
    generate_synthetic_window,
    ingest_csv,
)
from .dgp import SEMConfig
from .experiment import ExperimentConfig, aggregate_results_csv, run_experiment, write_report
from .gp import FitConfig


def _write_table_csv(table, path):
    with open(path, "w") as fh:
        fh.write("time," + ",".join(table.names) + "\n")
        for i in range(table.n):
            fields = [repr(float(table.times[i]))]
            for j in range(len(table.names)):
                fields.append(repr(float(table.values[i, j])) if table.mask[i, j] else "")
            fh.write(",".join(fields) + "\n")


def _cmd_generate(args):
    config = SyntheticConfig()
    os.makedirs(args.out, exist_ok=True)
    for w in range(args.windows):
        rng = np.random.default_rng([args.seed, w])
        window = generate_synthetic_window(config, rng)
        _write_table_csv(window.table, os.path.join(args.out, f"window_{w:03d}.csv"))
    print(f"wrote {args.windows} windows to {args.out}")


def _cmd_preprocess(args):
    columns = args.columns.split(",")
    raw = ingest_csv(args.input, {"columns": columns})
    roles = {c: ROLE_COVARIATE for c in columns}
    roles[args.output_column] = ROLE_OUTPUT
    table = discretise_hourly(raw, roles)
    _write_table_csv(table, args.out)
    print(f"wrote {table.n} hourly rows to {args.out}")


def _build_experiment_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    kwargs = {}
    for key in ("mode", "n_windows", "seed", "whole_row_masking"):
        if key in raw:
            kwargs[key] = raw[key]
    if "methods" in raw:
        kwargs["methods"] = tuple(raw["methods"])
    if "proportions" in raw:
        kwargs["proportions"] = tuple(raw["proportions"])
    for key, cls in (("synthetic", SyntheticConfig), ("fit", FitConfig),
                     ("sem", SEMConfig), ("mice", MICEConfig)):
        if key in raw:
            sub = dict(raw[key])
            for k in ("lengthscale_range", "nugget_bounds", "latent_lengthscale_range",
                      "readout_weights", "covariate_names"):
                if k in sub:
                    sub[k] = tuple(sub[k])
            kwargs[key] = cls(**sub)
    # flag overrides
    if args.seed is not None:
        kwargs["seed"] = args.seed
    if args.mode is not None:
        kwargs["mode"] = args.mode
    if args.methods is not None:
        kwargs["methods"] = tuple(args.methods.split(","))
    if args.proportions is not None:
        kwargs["proportions"] = tuple(float(p) for p in args.proportions.split(","))
    if args.windows is not None:
        kwargs["n_windows"] = args.windows
    return ExperimentConfig(**kwargs)


def _cmd_run(args):
    config = _build_experiment_config(args)
    report = run_experiment(config)
    write_report(report, args.out)
    for c in report.cells:
        print(f"{c.method}@{c.proportion}: mean MAE {c.mean_mae:.4f} (SE {c.se_mae:.4f})")
    if report.failures:
        print(f"{len(report.failures)} job(s) failed; see report.json", file=sys.stderr)


def _cmd_report(args):
    summary = aggregate_results_csv(args.results)
    print(json.dumps(summary, indent=2, sort_keys=True))


def _cmd_inspect(args):
    path = args.manifest
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path) as fh:
        print(json.dumps(json.load(fh), indent=2, sort_keys=True))


def main(argv=None):
    parser = argparse.ArgumentParser(prog="gpimpute")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic windows as CSVs")
    p.add_argument("--windows", type=int, default=14)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("preprocess", help="hourly-discretise a raw CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--columns", required=True, help="comma-separated variable columns")
    p.add_argument("--output-column", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("run", help="run a benchmark experiment")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", choices=["predict-output", "impute-covariates"], default=None)
    p.add_argument("--methods", default=None, help="comma-separated method list")
    p.add_argument("--proportions", default=None, help="comma-separated proportions")
    p.add_argument("--windows", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="re-aggregate a results CSV")
    p.add_argument("--results", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("inspect", help="dump an emulator manifest")
    p.add_argument("--manifest", required=True, help="manifest file or emulator directory")
    p.set_defaults(func=_cmd_inspect)

    args = parser.parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
