"""Benchmark harness: masking protocol, MAE evaluation, and the experiment
orchestrator over windows x methods x proportions.

Two modes mirror the two benchmark experiments:

* ``predict-output``: mask the output column; at inference every method sees
  time only.
* ``impute-covariates``: mask the covariate columns; the output stays fully
  observed and links the covariates. The sequential linked GP degenerates to
  independent GPs here and is therefore excluded from this mode.

MAE is reported in standardised units (original-unit MAE is also emitted via
the inverse z-score record). Standard errors are across windows.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .baselines import (
    ImputationMethodResult,
    MethodTag,
    MICEConfig,
    independent_gp_impute,
    locf_impute,
    mice_impute,
)
from .data import (
    ObservationTable,
    StandardisationRecord,
    SyntheticConfig,
    apply_mask,
    generate_synthetic_window,
    make_mask_plan,
    standardise,
)
from .dgp import SEMConfig, impute_covariates, predict_ensemble, train_sem
from .gp import FitConfig
from .kernels import KernelFamily, KernelSpec
from .linked import LayerArchitecture, NodeSpec, fit_sequential_lgp, link_predict_batch

MODE_PREDICT_OUTPUT = "predict-output"
MODE_IMPUTE_COVARIATES = "impute-covariates"


class IncompleteResultError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = MODE_PREDICT_OUTPUT
    methods: tuple[str, ...] = ("locf", "mice", "gp", "dgpsi")
    proportions: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4)
    n_windows: int = 14
    seed: int = 0
    whole_row_masking: bool = False
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    # Desk-scale SEM profile for benchmark runs; library defaults are heavier.
    sem: SEMConfig = field(
        default_factory=lambda: SEMConfig(
            iterations=40, burn_in=20, ess_sweeps=3, n_imputations=20
        )
    )
    mice: MICEConfig = field(default_factory=MICEConfig)

    def __post_init__(self):
        if self.mode not in (MODE_PREDICT_OUTPUT, MODE_IMPUTE_COVARIATES):
            raise ValueError(f"unknown mode: {self.mode!r}")
        bad = [m for m in self.methods if m not in {t.value for t in MethodTag}]
        if bad:
            raise ValueError(f"unknown methods: {bad}")


@dataclass
class CellPrediction:
    window: int
    time: float
    variable: str
    mean: float
    variance: float  # NaN where the method provides none
    truth: float


@dataclass
class MethodCell:
    """One (method, proportion) aggregate of the report."""

    method: str
    proportion: float
    per_window_mae: list[float]
    mean_mae: float
    se_mae: float
    per_window_mae_original: list[float]
    mean_mae_original: float


@dataclass
class EvaluationReport:
    mode: str
    cells: list[MethodCell]
    failures: list[dict]
    manifest: dict
    predictions: list[CellPrediction] = field(default_factory=list)

    def lookup(self, method: str, proportion: float) -> MethodCell:
        for c in self.cells:
            if c.method == method and c.proportion == proportion:
                return c
        raise KeyError((method, proportion))

    def to_json(self) -> str:
        payload = {
            "mode": self.mode,
            "manifest": self.manifest,
            "failures": self.failures,
            "results": [
                {
                    "method": c.method,
                    "proportion": c.proportion,
                    "per_window_mae": c.per_window_mae,
                    "mean_mae": c.mean_mae,
                    "se_mae": c.se_mae,
                    "per_window_mae_original": c.per_window_mae_original,
                    "mean_mae_original": c.mean_mae_original,
                }
                for c in self.cells
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def evaluate_mae(truth: ObservationTable, result: ImputationMethodResult, cells) -> float:
    """Mean absolute error over the evaluated cells, in the table's units."""
    total = 0.0
    for i, j in cells:
        if not result.filled.mask[i, j]:
            raise IncompleteResultError(f"no prediction at cell ({i}, {j})")
        total += abs(truth.values[i, j] - result.filled.values[i, j])
    return float(total / len(cells)) if cells else 0.0


def evaluate_mae_original(
    truth: ObservationTable,
    result: ImputationMethodResult,
    cells,
    record: StandardisationRecord,
) -> float:
    """As :func:`evaluate_mae` but rescaled to original per-column units."""
    total = 0.0
    for i, j in cells:
        sd = record.sds[truth.names[j]]
        total += abs(truth.values[i, j] - result.filled.values[i, j]) * sd
    return float(total / len(cells)) if cells else 0.0


def default_architecture(table: ObservationTable) -> LayerArchitecture:
    """Time -> one latent node per covariate -> output node, SE kernels."""
    se = KernelFamily.SQUARED_EXPONENTIAL
    latents = tuple(
        NodeSpec(c, KernelSpec(se, np.array([0.2]))) for c in table.covariate_names
    )
    out = NodeSpec(
        table.output_name, KernelSpec(se, np.ones(len(latents)))
    )
    return LayerArchitecture(input_dims=1, latent_nodes=latents, output_node=out)


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _standardise_pair(masked: ObservationTable, truth: ObservationTable):
    """Standardise the masked table on its observed cells; apply the same record
    to the ground-truth table so evaluation happens in the same units."""
    std_masked, record = standardise(masked)
    std_truth = truth.copy()
    for j, name in enumerate(truth.names):
        std_truth.values[:, j] = (truth.values[:, j] - record.means[name]) / record.sds[name]
    return std_masked, std_truth, record


def _run_method_predict_output(
    method: str, table: ObservationTable, plan_cells, config: ExperimentConfig, seed: int
) -> ImputationMethodResult:
    out_name = table.output_name
    if method == "locf":
        return locf_impute(table, out_name)
    if method == "gp":
        return independent_gp_impute(table, out_name, config.fit)
    if method == "mice":
        # experiment-1 constraint: time and output only
        mc = dataclasses.replace(config.mice, seed=seed)
        return mice_impute(table, mc, columns=[out_name])
    arch = default_architecture(table)
    out_j = table.col_index(out_name)
    miss_rows = np.array(sorted({i for i, j in plan_cells}))
    filled = table.copy()
    variance = np.full_like(table.values, np.nan)
    if method == "lgp":
        cov_idx = [table.col_index(c) for c in table.covariate_names]
        em = fit_sequential_lgp(
            table.times[:, None],
            table.values[:, cov_idx],
            table.mask[:, cov_idx],
            table.values[:, out_j],
            arch,
            config.fit,
            y_mask=table.mask[:, out_j],
        )
        mean, var = link_predict_batch(em, table.times[miss_rows, None])
        tag = MethodTag.LGP
    elif method == "dgpsi":
        em = train_sem(table, arch, config.sem, seed)
        mean = np.empty(miss_rows.size)
        var = np.empty(miss_rows.size)
        for k, i in enumerate(miss_rows):
            pred = predict_ensemble(em, [table.times[i]])
            mean[k], var[k] = pred.mixture.mean, pred.mixture.variance
        tag = MethodTag.DGPSI
    else:
        raise ValueError(f"method {method!r} not available in mode {config.mode!r}")
    filled.values[miss_rows, out_j] = mean
    variance[miss_rows, out_j] = var
    filled.mask[miss_rows, out_j] = True
    return ImputationMethodResult(filled=filled, variance=variance, method_tag=tag)


def _run_method_impute_covariates(
    method: str, table: ObservationTable, plan_cells, config: ExperimentConfig, seed: int
) -> ImputationMethodResult:
    covs = table.covariate_names
    if method == "locf":
        current = table
        for c in covs:
            current = locf_impute(current, c).filled
        return ImputationMethodResult(filled=current, variance=None, method_tag=MethodTag.LOCF)
    if method == "gp":
        filled = table.copy()
        variance = np.full_like(table.values, np.nan)
        for c in covs:
            r = independent_gp_impute(table, c, config.fit)
            j = table.col_index(c)
            filled.values[:, j] = r.filled.values[:, j]
            filled.mask[:, j] = True
            variance[:, j] = r.variance[:, j]
        return ImputationMethodResult(filled=filled, variance=variance, method_tag=MethodTag.GP)
    if method == "mice":
        mc = dataclasses.replace(config.mice, seed=seed)
        return mice_impute(table, mc)  # all columns participate in this mode
    if method == "dgpsi":
        arch = default_architecture(table)
        em = train_sem(table, arch, config.sem, seed)
        filled = table.copy()
        variance = np.full_like(table.values, np.nan)
        for c in covs:
            j = table.col_index(c)
            miss = np.where(~table.mask[:, j])[0]
            if miss.size == 0:
                filled.mask[:, j] = True
                continue
            preds = impute_covariates(em, table.times[miss], c)
            filled.values[miss, j] = [p.mixture.mean for p in preds]
            variance[miss, j] = [p.mixture.variance for p in preds]
            filled.mask[:, j] = True
        return ImputationMethodResult(filled=filled, variance=variance, method_tag=MethodTag.DGPSI)
    if method == "lgp":
        raise ValueError(
            "the sequential linked GP degenerates to independent GPs when imputing "
            "covariates and is excluded from this mode"
        )
    raise ValueError(f"unknown method: {method!r}")


def run_experiment(config: ExperimentConfig) -> EvaluationReport:
    """Mask -> fit -> impute -> evaluate per window/method/proportion.

    Stage errors are recorded per (window, method, proportion) and the run
    continues. Deterministic: all RNG streams derive from ``config.seed``.
    """
    methods = list(config.methods)
    if config.mode == MODE_IMPUTE_COVARIATES and "lgp" in methods:
        methods = [m for m in methods if m != "lgp"]

    windows = []
    for w in range(config.n_windows):
        rng = np.random.default_rng(_derived_seed(config.seed, w, 1))
        windows.append(generate_synthetic_window(config.synthetic, rng))

    per_cell: dict[tuple[str, float], list[float]] = {}
    per_cell_orig: dict[tuple[str, float], list[float]] = {}
    failures: list[dict] = []
    predictions: list[CellPrediction] = []

    for w, window in enumerate(windows):
        truth = window.table
        for k, prop in enumerate(config.proportions):
            mask_seed = _derived_seed(config.seed, w, k, 2)
            if config.mode == MODE_PREDICT_OUTPUT:
                targets = [truth.output_name]
            else:
                targets = truth.covariate_names
            plan = make_mask_plan(truth, prop, targets, mask_seed, config.whole_row_masking)
            masked = apply_mask(truth, plan)
            std_masked, std_truth, record = _standardise_pair(masked, truth)
            cells = [(i, j) for i, j in plan.masked_cells]
            for method in methods:
                method_seed = _derived_seed(config.seed, w, k, 3, methods.index(method))
                try:
                    if config.mode == MODE_PREDICT_OUTPUT:
                        result = _run_method_predict_output(
                            method, std_masked, cells, config, method_seed
                        )
                    else:
                        result = _run_method_impute_covariates(
                            method, std_masked, cells, config, method_seed
                        )
                    mae = evaluate_mae(std_truth, result, cells)
                    mae_orig = evaluate_mae_original(std_truth, result, cells, record)
                except Exception as exc:  # recorded, run continues
                    failures.append(
                        {"window": w, "method": method, "proportion": prop, "error": str(exc)}
                    )
                    continue
                per_cell.setdefault((method, prop), []).append(mae)
                per_cell_orig.setdefault((method, prop), []).append(mae_orig)
                for i, j in cells:
                    var = np.nan
                    if result.variance is not None:
                        var = float(result.variance[i, j])
                    predictions.append(
                        CellPrediction(
                            window=w,
                            time=float(std_truth.times[i]),
                            variable=std_truth.names[j],
                            mean=float(result.filled.values[i, j]),
                            variance=var,
                            truth=float(std_truth.values[i, j]),
                        )
                    )

    cells_out = []
    for method in methods:
        for prop in config.proportions:
            maes = per_cell.get((method, prop), [])
            maes_orig = per_cell_orig.get((method, prop), [])
            if maes:
                mean = float(np.mean(maes))
                se = float(np.std(maes, ddof=1) / np.sqrt(len(maes))) if len(maes) > 1 else 0.0
                mean_orig = float(np.mean(maes_orig))
            else:
                mean, se, mean_orig = float("nan"), float("nan"), float("nan")
            cells_out.append(
                MethodCell(
                    method=method,
                    proportion=prop,
                    per_window_mae=maes,
                    mean_mae=mean,
                    se_mae=se,
                    per_window_mae_original=maes_orig,
                    mean_mae_original=mean_orig,
                )
            )

    manifest = {
        "version": __version__,
        "seed": config.seed,
        "mode": config.mode,
        "methods": methods,
        "proportions": list(config.proportions),
        "n_windows": config.n_windows,
        "whole_row_masking": config.whole_row_masking,
        "synthetic": dataclasses.asdict(config.synthetic),
        "fit": {
            "n_starts": config.fit.n_starts,
            "seed": config.fit.seed,
            "max_iter": config.fit.max_iter,
            "lengthscale_range": list(config.fit.lengthscale_range),
            "nugget_bounds": list(config.fit.nugget_bounds),
            "family": config.fit.family.value,
        },
        "sem": {
            "iterations": config.sem.iterations,
            "burn_in": config.sem.burn_in,
            "ess_sweeps": config.sem.ess_sweeps,
            "n_imputations": config.sem.n_imputations,
            "randomize_sweep_order": config.sem.randomize_sweep_order,
            "refit_max_iter": config.sem.refit_max_iter,
        },
        "mice": dataclasses.asdict(config.mice),
    }
    return EvaluationReport(
        mode=config.mode,
        cells=cells_out,
        failures=failures,
        manifest=manifest,
        predictions=predictions,
    )


def write_results_csv(report: EvaluationReport, path: str):
    """Long-format `window,method,proportion,mae` rows."""
    with open(path, "w") as fh:
        fh.write("window,method,proportion,mae\n")
        for c in report.cells:
            for w, mae in enumerate(c.per_window_mae):
                fh.write(f"{w},{c.method},{float(c.proportion)!r},{float(mae)!r}\n")


def write_predictions_csv(report: EvaluationReport, path: str):
    with open(path, "w") as fh:
        fh.write("window,time,variable,mean,variance,truth,masked\n")
        for p in report.predictions:
            fh.write(
                f"{p.window},{p.time!r},{p.variable},{p.mean!r},{p.variance!r},{p.truth!r},1\n"
            )


def write_report(report: EvaluationReport, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(report.to_json())
    write_results_csv(report, os.path.join(out_dir, "results.csv"))
    write_predictions_csv(report, os.path.join(out_dir, "predictions.csv"))


def aggregate_results_csv(path: str) -> dict:
    """Re-aggregate a long-format results CSV into mean/SE per (method, proportion)."""
    rows: dict[tuple[str, float], list[float]] = {}
    with open(path) as fh:
        next(fh)
        for line in fh:
            w, method, prop, mae = line.strip().split(",")
            rows.setdefault((method, float(prop)), []).append(float(mae))
    out = {}
    for (method, prop), maes in sorted(rows.items()):
        se = float(np.std(maes, ddof=1) / np.sqrt(len(maes))) if len(maes) > 1 else 0.0
        out[f"{method}@{prop}"] = {
            "n_windows": len(maes),
            "mean_mae": float(np.mean(maes)),
            "se_mae": se,
        }
    return out
