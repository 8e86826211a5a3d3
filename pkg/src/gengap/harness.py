"""Experiment orchestration: config files, the train/measure/analyze/report
pipeline, and on-disk layout.

Output layout under the experiment directory:

    manifest.json        run manifest (config echo, seeds, cell statuses)
    data/                dataset arrays
    ckpt/<proc>/<k>_<j>.ggap
    pred/<proc>/{unlabeled,dev,test}.gpm
    metrics.csv          fixed-column metric report
    analysis/scores.csv  predictiveness scores per quantity
    plots/*.tsv          x/y series for external plotting
"""
from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import yaml

from . import metrics as me
from .analytics import (
    IncompleteGridError,
    DegenerateInputError,
    ProcedureRow,
    ProcedureTable,
    granulated_kendall,
    kendall_tau,
    loo_linear_prediction_error,
    mi_kappa,
)
from .data import DatasetBundle, DatasetSpec, SplitSizes, generate_dataset, load_dataset, save_dataset
from .models import ModelSpec
from .rng import mix64
from .training import (
    Augment,
    ConsistFlatObjective,
    ConsistObjective,
    DistillObjective,
    GridTrainingError,
    ModelGrid,
    ProcedureSpec,
    SamObjective,
    Schedule,
    SemiConsistObjective,
    StandardObjective,
    train_grid,
)

METRIC_COLUMNS = [
    "procedure",
    "model",
    "n",
    "train_loss",
    "test_loss",
    "gap",
    "train_err",
    "test_err",
    "inconsistency",
    "instability",
    "D",
    "disagreement",
    "c1",
    "s1",
    "one_sharpness",
    "hessian_eig",
    "bound_lambda",
    "bound_value",
]

PLOT_FAMILIES = {
    "gap_vs_D": ("D", "gap"),
    "gap_vs_inconsistency": ("inconsistency", "gap"),
    "testerr_vs_disagreement": ("disagreement", "test_err"),
    "gap_vs_sharpness": ("one_sharpness", "gap"),
}

QUANTITY_COLUMNS = (
    "inconsistency",
    "instability",
    "D",
    "disagreement",
    "c1",
    "s1",
    "one_sharpness",
    "hessian_eig",
)


class ConfigError(ValueError):
    """The experiment configuration is malformed."""


@dataclass
class MetricsOptions:
    sharpness_rho: float | None = None
    hessian: bool = False
    bound_information: float | None = None
    bound_gamma: float = 1.0


@dataclass
class AnalyticsOptions:
    quantities: tuple[str, ...] = ("inconsistency", "D", "disagreement")
    target: str = "gap"
    max_condition_size: int = 2
    trainloss_cutoff: float | None = None


@dataclass
class ProcedureEntry:
    spec: ProcedureSpec
    axes: dict[str, str]


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    replicates: int
    axes: tuple[str, ...]
    procedures: list[ProcedureEntry]
    metrics: MetricsOptions = field(default_factory=MetricsOptions)
    analytics: AnalyticsOptions = field(default_factory=AnalyticsOptions)

    def __post_init__(self):
        names = [p.spec.name for p in self.procedures]
        if len(set(names)) != len(names):
            raise ConfigError("procedure names must be unique")
        for p in self.procedures:
            for axis in self.axes:
                if axis not in p.axes:
                    raise ConfigError(
                        f"procedure {p.spec.name!r} lacks declared axis {axis!r}"
                    )


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def _parse_objective(d: dict):
    kind = d.get("kind", "standard")
    if kind == "standard":
        return StandardObjective()
    if kind == "consist":
        return ConsistObjective(beta=float(d["beta"]))
    if kind == "sam":
        return SamObjective(rho=float(d["rho"]), m=int(d["m"]))
    if kind == "consist_flat":
        return ConsistFlatObjective(
            beta=float(d["beta"]), rho=float(d["rho"]), m=int(d["m"])
        )
    if kind == "semi_consist":
        return SemiConsistObjective(
            beta=float(d["beta"]),
            conf_threshold=float(d["conf_threshold"]),
            teacher_momentum=float(d.get("teacher_momentum", 0.999)),
        )
    if kind == "distill":
        return DistillObjective(
            teacher_path=str(d["teacher_path"]), beta_kl=float(d["beta_kl"])
        )
    raise ConfigError(f"unknown objective kind {kind!r}")


def _parse_schedule(d: dict) -> Schedule:
    return Schedule(
        kind=str(d.get("kind", "constant")),
        base_lr=float(d["base_lr"]),
        warmup_steps=int(d.get("warmup_steps", 0)),
        end_fraction=float(d.get("end_fraction", 0.0)),
    )


def _parse_augment(d: dict | None) -> Augment:
    if not d:
        return Augment()
    return Augment(kind=str(d.get("kind", "none")), scale=float(d.get("scale", 0.0)))


def _parse_model(d: dict, dataset: DatasetSpec) -> ModelSpec:
    hidden = tuple((int(w), str(a)) for w, a in d.get("hidden", []))
    return ModelSpec(
        input_dim=int(d.get("input_dim", dataset.dims)),
        hidden=hidden,
        num_classes=int(d.get("num_classes", dataset.classes)),
    )


def _parse_procedure(d: dict, dataset: DatasetSpec, default_model: dict) -> ProcedureEntry:
    model = _parse_model(d.get("model", default_model), dataset)
    ema = d.get("iterate_averaging")
    ema_momentum = None
    if ema and ema.get("kind", "none") == "ema":
        ema_momentum = float(ema["momentum"])
    spec = ProcedureSpec(
        name=str(d["name"]),
        model=model,
        objective=_parse_objective(d.get("objective", {})),
        schedule=_parse_schedule(d["schedule"]),
        batch_size=int(d["batch_size"]),
        base_seed=int(d["base_seed"]),
        epochs=int(d["epochs"]) if "epochs" in d else None,
        update_steps=int(d["update_steps"]) if "update_steps" in d else None,
        momentum=float(d.get("momentum", 0.9)),
        weight_decay=float(d.get("weight_decay", 0.0)),
        label_smoothing=float(d.get("label_smoothing", 0.0)),
        grad_clip=float(d["grad_clip"]) if d.get("grad_clip") is not None else None,
        ema_momentum=ema_momentum,
        augment=_parse_augment(d.get("augment")),
        init_from=d.get("init_from"),
    )
    axes = {str(k): str(v) for k, v in d.get("axes", {}).items()}
    return ProcedureEntry(spec=spec, axes=axes)


def parse_config(raw: dict) -> ExperimentConfig:
    try:
        ds = raw["dataset"]
        sizes = ds["sizes"]
        dataset = DatasetSpec(
            generator=str(ds["generator"]),
            seed=int(ds["seed"]),
            sizes=SplitSizes(
                per_train_set=int(sizes["per_train_set"]),
                train_sets=int(sizes["train_sets"]),
                unlabeled=int(sizes["unlabeled"]),
                dev=int(sizes["dev"]),
                test=int(sizes["test"]),
            ),
            classes=int(ds.get("classes", 2)),
            dims=int(ds.get("dims", 2)),
            sigma=float(ds.get("sigma", 1.0)),
            noise=float(ds.get("noise", 0.1)),
            centers_seed=int(ds.get("centers_seed", 0)),
        )
        default_model = raw.get("model", {})
        procedures = [
            _parse_procedure(p, dataset, default_model) for p in raw["procedures"]
        ]
        mo = raw.get("metrics", {})
        bound = mo.get("bound") or {}
        metrics_opts = MetricsOptions(
            sharpness_rho=(
                float(mo["sharpness_rho"]) if mo.get("sharpness_rho") is not None else None
            ),
            hessian=bool(mo.get("hessian", False)),
            bound_information=(
                float(bound["information"]) if "information" in bound else None
            ),
            bound_gamma=float(bound.get("gamma", 1.0)),
        )
        ao = raw.get("analytics", {})
        analytics_opts = AnalyticsOptions(
            quantities=tuple(ao.get("quantities", ("inconsistency", "D", "disagreement"))),
            target=str(ao.get("target", "gap")),
            max_condition_size=int(ao.get("max_condition_size", 2)),
            trainloss_cutoff=(
                float(ao["trainloss_cutoff"])
                if ao.get("trainloss_cutoff") is not None
                else None
            ),
        )
        return ExperimentConfig(
            dataset=dataset,
            replicates=int(raw["replicates"]),
            axes=tuple(str(a) for a in raw.get("axes", [])),
            procedures=procedures,
            metrics=metrics_opts,
            analytics=analytics_opts,
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as f:
        raw = yaml.safe_load(f)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} does not contain a config mapping")
    return parse_config(raw)


def apply_seed_override(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Re-key the dataset and every procedure from one master seed."""
    dataset = DatasetSpec(
        generator=config.dataset.generator,
        seed=seed,
        sizes=config.dataset.sizes,
        classes=config.dataset.classes,
        dims=config.dataset.dims,
        sigma=config.dataset.sigma,
        noise=config.dataset.noise,
        centers_seed=config.dataset.centers_seed,
    )
    procedures = []
    for i, entry in enumerate(config.procedures):
        spec = entry.spec
        procedures.append(
            ProcedureEntry(
                spec=ProcedureSpec(
                    name=spec.name,
                    model=spec.model,
                    objective=spec.objective,
                    schedule=spec.schedule,
                    batch_size=spec.batch_size,
                    base_seed=mix64(seed, i),
                    epochs=spec.epochs,
                    update_steps=spec.update_steps,
                    momentum=spec.momentum,
                    weight_decay=spec.weight_decay,
                    label_smoothing=spec.label_smoothing,
                    grad_clip=spec.grad_clip,
                    ema_momentum=spec.ema_momentum,
                    augment=spec.augment,
                    init_from=spec.init_from,
                ),
                axes=dict(entry.axes),
            )
        )
    return ExperimentConfig(
        dataset=dataset,
        replicates=config.replicates,
        axes=config.axes,
        procedures=procedures,
        metrics=config.metrics,
        analytics=config.analytics,
    )


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

def default_out_root() -> Path:
    return Path(os.environ.get("GENGAP_OUT", "out"))


def ensure_dataset(config: ExperimentConfig, out: Path) -> DatasetBundle:
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    path = data_dir / "dataset.npz"
    if path.exists():
        try:
            return load_dataset(config.dataset, str(path))
        except Exception:
            pass  # stale or foreign file: regenerate
    bundle = generate_dataset(config.dataset)
    save_dataset(bundle, str(path))
    return bundle


def train_all(
    config: ExperimentConfig, bundle: DatasetBundle, out: Path, jobs: int = 1
) -> tuple[dict[str, ModelGrid], list[str]]:
    """Train one grid per procedure; failures are recorded, not fatal."""
    grids: dict[str, ModelGrid] = {}
    failures: list[str] = []
    train_sets = [bundle.train_set(k) for k in range(config.dataset.sizes.train_sets)]
    unlabeled_x = bundle.split("unlabeled")[0]
    for entry in config.procedures:
        try:
            grids[entry.spec.name] = train_grid(
                entry.spec,
                train_sets,
                config.replicates,
                unlabeled=unlabeled_x,
                out_dir=out,
                jobs=jobs,
            )
        except GridTrainingError as exc:
            grids[entry.spec.name] = exc.partial_grid
            failures.extend(
                f"{entry.spec.name} cell (k={k}, j={j}): {e}" for k, j, e in exc.failures
            )
    return grids, failures


def _fmt(value) -> str:
    if value is None:
        return ""
    v = float(value)
    if math.isnan(v):
        return ""
    return repr(v)


def measure(
    config: ExperimentConfig,
    bundle: DatasetBundle,
    grids: dict[str, ModelGrid],
    out: Path,
) -> list[dict[str, object]]:
    """Predict on all eval splits, compute the metric report, write CSV."""
    rows: list[dict[str, object]] = []
    pred_root = out / "pred"
    x_unl = bundle.split("unlabeled")[0]
    x_dev, y_dev = bundle.split("dev")
    x_test, y_test = bundle.split("test")
    n_train = config.dataset.sizes.per_train_set

    for entry in config.procedures:
        proc = entry.spec
        grid = grids.get(proc.name)
        if grid is None or not grid.cells:
            continue
        proc_pred = pred_root / proc.name
        proc_pred.mkdir(parents=True, exist_ok=True)
        pm_unl = me.predict_grid(grid, x_unl, "unlabeled")
        pm_unl.save(str(proc_pred / "unlabeled.gpm"))
        me.predict_grid(grid, x_dev, "dev").save(str(proc_pred / "dev.gpm"))
        me.predict_grid(grid, x_test, "test").save(str(proc_pred / "test.gpm"))

        model_rows = []
        grid_models = grid.models()
        for row_idx, model in enumerate(grid_models):
            xk, yk = bundle.train_set(model.lineage.k)
            train_loss, train_err = me.eval_loss_error(model, xk, yk)
            test_loss, test_err = me.eval_loss_error(model, x_test, y_test)
            record: dict[str, object] = {
                "procedure": proc.name,
                "model": f"k{model.lineage.k}_j{model.lineage.j}",
                "n": n_train,
                "train_loss": train_loss,
                "test_loss": test_loss,
                "gap": test_loss - train_loss,
                "train_err": train_err,
                "test_err": test_err,
            }
            try:
                record["inconsistency"] = me.modelwise_inconsistency(pm_unl, row_idx)
                record["disagreement"] = me.modelwise_disagreement(pm_unl, row_idx)
            except me.EstimatorError:
                pass
            if config.metrics.sharpness_rho is not None:
                record["one_sharpness"] = me.one_sharpness(
                    model, xk, yk, config.metrics.sharpness_rho
                )
            if config.metrics.hessian:
                try:
                    record["hessian_eig"] = me.hessian_top_eigenvalue(model, xk, yk)
                except me.PowerIterationError as exc:
                    record["hessian_eig"] = exc.last_estimate
            model_rows.append(record)

        agg: dict[str, object] = {
            "procedure": proc.name,
            "model": "aggregate",
            "n": n_train,
        }
        for col in ("train_loss", "test_loss", "gap", "train_err", "test_err",
                    "one_sharpness", "hessian_eig"):
            vals = [r[col] for r in model_rows if col in r]
            if vals:
                agg[col] = float(np.mean(vals))
        try:
            agg["inconsistency"] = me.estimate_inconsistency(pm_unl)
            agg["disagreement"] = me.estimate_disagreement(pm_unl)
        except me.EstimatorError:
            pass
        try:
            agg["instability"] = me.estimate_instability(pm_unl)
        except me.EstimatorError:
            pass
        if "inconsistency" in agg and "instability" in agg:
            agg["D"] = float(agg["inconsistency"]) + float(agg["instability"])
        try:
            c1, s1 = me.one_norm_variants(pm_unl)
            agg["c1"] = c1
            agg["s1"] = s1
        except me.EstimatorError:
            pass
        if config.metrics.bound_information is not None and "D" in agg:
            inputs = me.BoundInputs(
                divergence=float(agg["D"]),
                information=config.metrics.bound_information,
                train_size=n_train,
                lipschitz_scale=config.metrics.bound_gamma,
            )
            lam, value = me.bound_rhs(inputs)
            agg["bound_lambda"] = lam
            agg["bound_value"] = value
        rows.append(agg)
        rows.extend(model_rows)

    write_metrics_csv(rows, out / "metrics.csv")
    return rows


def write_metrics_csv(rows: Iterable[dict[str, object]], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.get("procedure", ""),
                    row.get("model", ""),
                    str(row.get("n", "")),
                ]
                + [_fmt(row.get(col)) for col in METRIC_COLUMNS[3:]]
            )


def read_metrics_csv(path: Path) -> list[dict[str, object]]:
    rows: list[dict[str, object]] = []
    with open(path, newline="") as f:
        for raw in csv.DictReader(f):
            row: dict[str, object] = {
                "procedure": raw["procedure"],
                "model": raw["model"],
                "n": int(raw["n"]) if raw["n"] else None,
            }
            for col in METRIC_COLUMNS[3:]:
                row[col] = float(raw[col]) if raw[col] else None
            rows.append(row)
    return rows


def build_procedure_table(
    rows: list[dict[str, object]],
    axes_map: dict[str, dict[str, str]],
    axes: tuple[str, ...],
    quantity: str,
    target: str,
    trainloss_cutoff: float | None = None,
) -> ProcedureTable:
    table_rows = []
    for row in rows:
        if row.get("model") != "aggregate":
            continue
        name = str(row["procedure"])
        if name not in axes_map:
            continue
        mu, g = row.get(quantity), row.get(target)
        if mu is None or g is None:
            continue
        if trainloss_cutoff is not None and float(row["train_loss"]) > trainloss_cutoff:
            continue
        table_rows.append(
            ProcedureRow(name, axes_map[name], float(mu), float(g))
        )
    return ProcedureTable(axes=axes, rows=tuple(table_rows))


def analyze(
    config: ExperimentConfig, rows: list[dict[str, object]], out: Path
) -> list[dict[str, object]]:
    """Score each configured quantity against the target; write scores CSV."""
    axes_map = {p.spec.name: dict(p.axes) for p in config.procedures}
    out_rows: list[dict[str, object]] = []
    for quantity in config.analytics.quantities:
        table = build_procedure_table(
            rows,
            axes_map,
            config.axes,
            quantity,
            config.analytics.target,
            config.analytics.trainloss_cutoff,
        )
        if len(table.rows) < 2:
            continue
        pairs = [(r.quantity, r.gap) for r in table.rows]
        score: dict[str, object] = {
            "quantity": quantity,
            "target": config.analytics.target,
            "tau": kendall_tau(pairs),
        }
        try:
            psi_all, per_axis = granulated_kendall(table)
            score["Psi"] = psi_all
            for axis in config.axes:
                score[f"psi_{axis}"] = per_axis[axis]
        except (IncompleteGridError, DegenerateInputError):
            pass
        try:
            kappa, per_s = mi_kappa(table, config.analytics.max_condition_size)
            score["kappa"] = kappa
            score["kappa_s0"] = per_s[()]
        except DegenerateInputError:
            pass
        try:
            score["loo_error"] = loo_linear_prediction_error(
                [r.quantity for r in table.rows], [r.gap for r in table.rows]
            )
        except DegenerateInputError:
            pass
        out_rows.append(score)
    write_scores_csv(out_rows, config.axes, out / "analysis" / "scores.csv")
    return out_rows


def write_scores_csv(rows, axes: tuple[str, ...], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["quantity", "target", "tau"] + [f"psi_{a}" for a in axes] + [
        "Psi",
        "kappa",
        "kappa_s0",
        "loo_error",
    ]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(
                [row.get("quantity", ""), row.get("target", "")]
                + [_fmt(row.get(c)) for c in columns[2:]]
            )


def report_plots(
    rows: list[dict[str, object]], out: Path, families: Iterable[str] | None = None
) -> list[Path]:
    """Emit per-family x/y TSV series over procedure aggregates."""
    plot_dir = out / "plots"
    plot_dir.mkdir(parents=True, exist_ok=True)
    agg_rows = [r for r in rows if r.get("model") == "aggregate"]
    written = []
    for family in families if families is not None else PLOT_FAMILIES:
        x_col, y_col = PLOT_FAMILIES[family]
        for row in agg_rows:
            if row.get(x_col) is None or row.get(y_col) is None:
                raise KeyError(
                    f"plot family {family!r} needs column {x_col!r}/{y_col!r} "
                    f"missing for procedure {row.get('procedure')!r}"
                )
        path = plot_dir / f"{family}.tsv"
        with open(path, "w") as f:
            f.write(f"procedure\t{x_col}\t{y_col}\n")
            for row in agg_rows:
                f.write(
                    f"{row['procedure']}\t{_fmt(row[x_col])}\t{_fmt(row[y_col])}\n"
                )
        written.append(path)
    return written


def available_plot_families(rows: list[dict[str, object]]) -> list[str]:
    agg = [r for r in rows if r.get("model") == "aggregate"]
    out = []
    for family, (x_col, y_col) in PLOT_FAMILIES.items():
        if agg and all(r.get(x_col) is not None and r.get(y_col) is not None for r in agg):
            out.append(family)
        elif not agg:
            out.append(family)
    return out


@dataclass
class ExperimentResult:
    out: Path
    metric_rows: list[dict[str, object]]
    score_rows: list[dict[str, object]]
    failures: list[str]


def run_experiment(
    config: ExperimentConfig, out: str | Path, jobs: int = 1
) -> ExperimentResult:
    """Full pipeline: data, grids, prediction matrices, metrics, analytics,
    plot series, manifest.  Reruns reuse valid checkpoints and the stored
    dataset, so a completed directory is a no-op."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    bundle = ensure_dataset(config, out)
    grids, failures = train_all(config, bundle, out, jobs=jobs)
    rows = measure(config, bundle, grids, out)
    scores = analyze(config, rows, out)
    report_plots(rows, out, families=available_plot_families(rows))
    manifest = {
        "dataset": {
            "generator": config.dataset.generator,
            "seed": config.dataset.seed,
            "splits": {
                name: len(idx) for name, idx in bundle.all_splits().items()
            },
        },
        "procedures": [p.spec.name for p in config.procedures],
        "replicates": config.replicates,
        "failures": failures,
        "wall_time_sec": time.time() - started,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return ExperimentResult(out, rows, scores, failures)
