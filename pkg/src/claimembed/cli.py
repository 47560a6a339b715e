"""Command-line interface.

Every command takes ``--seed``; results go to CSV (and optional SVG) files,
progress and timings to stderr.
"""

from __future__ import annotations

import csv
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import data as datamod
from .config import model_config, read_config
from .evaluate import (
    MODELS,
    NEURAL,
    ExperimentSpec,
    audit_fold,
    contextual_comparison,
    cross_validate,
    fit_fold,
    model_settings,
    run_ladder,
    write_report_rows,
    Metrics,
)
from .glm import write_coefficients, write_relativities
from .nets import export_embeddings, import_embeddings, save_checkpoint, load_checkpoint
from .attention import export_contextual
from .reduce import TsneConfig, export_plot_data, pca, tsne
from .synth import generate


def log(message: str) -> None:
    click.echo(message, err=True)


seed_option = click.option("--seed", type=int, default=0, show_default=True, help="Seed for every random draw.")
config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="key = value settings file.")


def load_config(path) -> dict:
    return read_config(path) if path else {}


def spec_for(model: str, folds: int, seed: int, config: dict) -> ExperimentSpec:
    return ExperimentSpec(model, folds, seed, model_config(config, model, model_settings(model)))


def load_dataset(path) -> datamod.Dataset:
    return datamod.load_csv(path)


def ensure_parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Claim-severity models with categorical embeddings."""


@main.command()
@click.option("--rows", "n", type=int, default=50_000, show_default=True)
@click.option("--interaction", type=float, default=0.6, show_default=True, help="Zone x basement interaction strength.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--truth", type=click.Path(dir_okay=False), help="Also write the planted level effects.")
@seed_option
def synth(n, interaction, out, truth, seed):
    """Generate a seeded synthetic claims table."""
    frame, planted = generate(n, seed, interaction=interaction)
    datamod.write_frame(frame, ensure_parent(out))
    if truth:
        with open(ensure_parent(truth), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variable", "level", "effect", "interaction_score"])
            groups = [
                ("floodZone", planted.zone_effect, planted.zone_score),
                ("basementEnclosureCrawlspaceType", planted.basement_effect, planted.basement_score),
                ("occupancyType", planted.occupancy_effect, {}),
                ("numberOfFloorsInTheInsuredBuilding", planted.floors_effect, {}),
                ("primaryResidence", planted.primary_effect, {}),
            ]
            for var, effects, scores in groups:
                for level, value in effects.items():
                    score = scores.get(level)
                    w.writerow([var, level, repr(float(value)), "" if score is None else repr(float(score))])
    log(f"wrote {len(frame)} rows to {out}")


@main.command()
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Cleaned CSV.")
@click.option("--year-column", default="yearOfLoss", show_default=True)
@click.option("--start", type=int, help="First loss year kept.")
@click.option("--end", type=int, help="Last loss year kept.")
@click.option("--sample", type=int, help="Random subsample size.")
@click.option("--summary-dir", type=click.Path(file_okay=False), help="Write summary statistics here.")
@seed_option
def prepare(source, out, year_column, start, end, sample, summary_dir, seed):
    """Load, filter by loss year, subsample and summarize a claims CSV."""
    raw = pd.read_csv(source, dtype=str, keep_default_na=False, na_values=[])
    if start is not None or end is not None:
        if year_column not in raw.columns:
            raise click.BadParameter(f"column {year_column!r} not in {source}", param_hint="--year-column")
        years = pd.to_numeric(raw[year_column], errors="coerce")
        keep = years.notna()
        if start is not None:
            keep &= years >= start
        if end is not None:
            keep &= years <= end
        raw = raw[keep].reset_index(drop=True)
        log(f"kept {len(raw)} rows with {year_column} in [{start}, {end}]")
    dataset = datamod.parse_frame(raw)
    for line in dataset.report.lines():
        log(line)
    if sample is not None:
        dataset = datamod.subsample(dataset, sample, seed)
    dataset.to_csv(ensure_parent(out))
    if summary_dir:
        datamod.summarize(dataset, summary_dir)
    log(f"wrote {dataset.n_rows} rows to {out}")


@main.command()
@click.argument("dataset_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@seed_option
def split(dataset_path, folds, out, seed):
    """Write the k-fold plan with the analysis/assessment roles of each training row."""
    dataset = load_dataset(dataset_path)
    plan = datamod.make_splits(dataset.n_rows, folds, seed)
    plan.to_csv(ensure_parent(out))
    log(f"wrote {plan.k}-fold plan for {plan.n_rows} rows to {out}")


def _plan(dataset, splits, folds, seed):
    if splits:
        plan = datamod.SplitPlan.from_csv(splits)
        if plan.n_rows != dataset.n_rows:
            raise click.BadParameter("split plan does not match the dataset", param_hint="--splits")
        return plan
    return datamod.make_splits(dataset.n_rows, folds, seed)


@main.command()
@click.argument("dataset_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--model", type=click.Choice(MODELS), required=True)
@click.option("--fold", type=int, default=0, show_default=True)
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--splits", type=click.Path(exists=True, dir_okay=False), help="Split plan from the split command.")
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@config_option
@seed_option
def fit(dataset_path, model, fold, folds, splits, out_dir, config_path, seed):
    """Fit one model on one fold and score its held-out rows."""
    dataset = load_dataset(dataset_path)
    plan = _plan(dataset, splits, folds, seed)
    if not 0 <= fold < plan.k:
        raise click.BadParameter(f"fold must be in [0, {plan.k})", param_hint="--fold")
    spec = spec_for(model, plan.k, seed, load_config(config_path))
    f = plan.folds[fold]
    estimator, fit_rows = fit_fold(spec, dataset, f)
    audit_fold(fit_rows, f.test)
    test = dataset.frame.iloc[f.test].reset_index(drop=True)
    pred = estimator.predict(test)
    actual = dataset.y[f.test]
    metrics = Metrics.of(pred, actual)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "actual", "predicted"])
        for row, a, p in zip(f.test, actual, pred):
            w.writerow([int(row), repr(float(a)), repr(float(p))])
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "seed", "config", "fold", "rmse", "mae", "n"])
        w.writerow([model, seed, spec.config_json(), fold, repr(metrics.rmse), repr(metrics.mae), metrics.n])
    glm = getattr(estimator, "glm_", estimator)
    if hasattr(glm, "fit_"):
        write_coefficients(glm.fit_, out / "coefficients.txt")
        if glm.link == "log" and glm.fit_.factors:
            write_relativities(glm.relativities(), out / "relativities.csv")
    net = getattr(estimator, "net_", estimator)
    if hasattr(net, "params_"):
        save_checkpoint(net, out / "checkpoint.json")
        export_embeddings(net.embeddings_, out / "embeddings.csv")
    log(f"{model} fold {fold}: rmse {metrics.rmse:,.2f} mae {metrics.mae:,.2f}")


@main.command()
@click.argument("dataset_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--model", type=click.Choice(MODELS), required=True)
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--splits", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@config_option
@seed_option
def cv(dataset_path, model, folds, splits, out, config_path, seed):
    """Cross-validate one model; writes per-fold and mean RMSE/MAE."""
    dataset = load_dataset(dataset_path)
    plan = _plan(dataset, splits, folds, seed)
    spec = spec_for(model, plan.k, seed, load_config(config_path))
    report = cross_validate(spec, dataset, plan, log=log)
    report.to_csv(ensure_parent(out))
    log(f"{model} mean: rmse {report.mean.rmse:,.2f} mae {report.mean.mae:,.2f}")


@main.command()
@click.argument("dataset_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--models", default=",".join(MODELS), show_default=True, help="Comma-separated model names, in table order.")
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--table", type=click.Path(dir_okay=False), help="Also write the aligned text table here.")
@config_option
@seed_option
def ladder(dataset_path, models, folds, out, table, config_path, seed):
    """Cross-validate several models and tabulate mean RMSE/MAE."""
    names = [m.strip() for m in models.split(",") if m.strip()]
    unknown = [m for m in names if m not in MODELS]
    if unknown:
        raise click.BadParameter(f"unknown models {unknown}", param_hint="--models")
    dataset = load_dataset(dataset_path)
    config = load_config(config_path)
    specs = [spec_for(m, folds, seed, config) for m in names]
    result = run_ladder(dataset, specs, log=log)
    result.to_csv(ensure_parent(out))
    text = result.table()
    if table:
        ensure_parent(table).write_text(text)
    click.echo(text, nl=False)
    if result.errors:
        for message in result.errors.values():
            log(f"error: {message}")
        sys.exit(1)


@main.command("export-embeddings")
@click.argument("dataset_path", type=click.Path(exists=True, dir_okay=False), required=False)
@click.option("--model", type=click.Choice(sorted(NEURAL | {"glm-embed"})), default="mlp-1d", show_default=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), help="Export from a saved network instead of training.")
@click.option("--fold", type=int, default=0, show_default=True)
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@config_option
@seed_option
def export_embeddings_cmd(dataset_path, model, checkpoint, fold, folds, out, config_path, seed):
    """Write learned level embeddings (one row per level, plus the unseen slot)."""
    if checkpoint:
        net = load_checkpoint(checkpoint)
    else:
        if dataset_path is None:
            raise click.UsageError("give a dataset to train on or --checkpoint")
        dataset = load_dataset(dataset_path)
        plan = datamod.make_splits(dataset.n_rows, folds, seed)
        spec = spec_for(model, folds, seed, load_config(config_path))
        estimator, _ = fit_fold(spec, dataset, plan.folds[fold])
        net = getattr(estimator, "net_", estimator)
    export_embeddings(net.embeddings_, ensure_parent(out))
    log(f"wrote embeddings for {', '.join(net.categorical)} to {out}")


def _group_of(label: str, grouping: str | None) -> str:
    if grouping == "prefix":
        return datamod.zone_prefix(label) if label != datamod.MISSING_LEVEL else label
    return ""


@main.command()
@click.argument("embeddings_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--variable", required=True)
@click.option("--method", type=click.Choice(["pca", "tsne"]), default="pca", show_default=True)
@click.option("--components", type=int, default=2, show_default=True)
@click.option("--perplexity", type=float, multiple=True, help="Repeat for a sweep; default 2, 3, 5 and 10.")
@click.option("--steps", type=int, default=10_000, show_default=True)
@click.option("--learning-rate", type=float, default=100.0, show_default=True)
@click.option("--group", type=click.Choice(["prefix"]), help="Facet the plot by label prefix.")
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--svg/--no-svg", default=True, show_default=True)
@seed_option
def reduce(embeddings_path, variable, method, components, perplexity, steps, learning_rate, group, out_dir, svg, seed):
    """PCA or t-SNE of one variable's embeddings, with plot data."""
    tables = import_embeddings(embeddings_path)
    if variable not in tables:
        raise click.BadParameter(f"{variable!r} not in {embeddings_path}; found {sorted(tables)}", param_hint="--variable")
    table = tables[variable]
    labels = list(table.vocabulary.labels)
    points = table.weights[:-1]
    groups = [_group_of(lab, group) for lab in labels] if group else None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if method == "pca" or points.shape[1] == 1:
        if points.shape[1] == 1:
            coords = points
        else:
            res = pca(points, min(components, points.shape[1], len(points) - 1))
            coords = res.projected[:, :2]
            with open(out / f"{variable}_pca_variance.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["component", "variance", "proportion", "cumulative"])
                for k, (v, p, c) in enumerate(zip(res.variances, res.proportions, res.cumulative), 1):
                    w.writerow([k, repr(float(v)), repr(float(p)), repr(float(c))])
        stem = out / f"{variable}_{'line' if points.shape[1] == 1 else 'pca'}"
        export_plot_data(coords, labels, f"{stem}.csv", f"{stem}.svg" if svg else None, groups, title=variable)
        log(f"wrote {stem}.csv")
        return
    for perp in perplexity or (2.0, 3.0, 5.0, 10.0):
        config = TsneConfig(perplexity=perp, learning_rate=learning_rate, n_steps=steps, seed=seed)
        res = tsne(points, config)
        stem = out / f"{variable}_tsne_p{perp:g}"
        export_plot_data(res.embedding, labels, f"{stem}.csv", f"{stem}.svg" if svg else None, groups, title=f"{variable}, perplexity {perp:g}")
        with open(f"{stem}_kl.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "kl"])
            for s, kl in zip(res.kl_steps, res.kl_trace):
                w.writerow([s, repr(kl)])
        if res.unconverged:
            log(f"perplexity {perp:g}: bandwidth search did not converge for points {res.unconverged}")
        log(f"perplexity {perp:g}: KL {res.initial_kl:.4f} -> {res.final_kl:.4f}")


@main.command()
@click.argument("dataset_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--sample", "sample_size", type=int, default=10_000, show_default=True)
@click.option("--variable", "variables", multiple=True, default=("floodZone",), show_default=True)
@click.option("--fold", type=int, default=0, show_default=True)
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--embeddings-out", type=click.Path(dir_okay=False), help="Also write paired static/contextual rows.")
@config_option
@seed_option
def contextual(dataset_path, sample_size, variables, fold, folds, out, embeddings_out, config_path, seed):
    """Compare gamma GLMs on static and contextual TabTransformer embeddings."""
    dataset = load_dataset(dataset_path)
    config = model_config(load_config(config_path), "tabtransformer", model_settings("tabtransformer"))
    try:
        result, model, rows = contextual_comparison(dataset, sample_size, variables, seed, folds, fold, config)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc
    result.to_csv(ensure_parent(out))
    if embeddings_out:
        X = dataset.frame.iloc[rows].reset_index(drop=True)
        static, ctx = model.extract_contextual(X, variables[0])
        export_contextual(static, ctx, ensure_parent(embeddings_out), observation_ids=rows)
    click.echo(result.table(), nl=False)


if __name__ == "__main__":
    main()
