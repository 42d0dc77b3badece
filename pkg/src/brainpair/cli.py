"""Command-line experiment driver.

Every subcommand takes one YAML config (``--config``), derives a write-once
run directory named from the resolved-config hash and seed, and drops a
config snapshot plus a version string inside it, so any output directory is
self-describing and reproducible.  The output root comes from ``--out``,
the ``BRAINPAIR_OUT`` environment variable, or ``./runs``.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
from pathlib import Path

import click
import numpy as np

from . import config as cfgmod
from .analysis import ExplainConfig, explain, aggregate_importance, export_report, \
    max_channel_correlation, max_fc_correlation
from .augment import identity_view
from .data import Dataset, INT_DTYPE, FLOAT_DTYPE, AtlasVolume, Phenotype, PhenotypeTable, \
    load_dataset, make_folds, save_dataset, _read_blob
from .downstream import embed_instances, make_fitted_head, run_cv, train_probe, _labels_for
from .graphs import build_instance
from .model import GraphImageEncoder, load_checkpoint, save_checkpoint
from .selfsup import TrainLog, train_ssl
from .synth import generate_synthetic
from .model import build_predictor

OUT_ENV = "BRAINPAIR_OUT"


def _version_string() -> str:
    try:
        from importlib.metadata import version

        v = version("brainpair")
    except Exception:
        v = "0.1.0"
    describe = ""
    try:
        describe = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        ).stdout.strip()
    except Exception:
        pass
    return f"brainpair {v}" + (f" ({describe})" if describe else "")


def _out_root(out: str | None) -> Path:
    return Path(out or os.environ.get(OUT_ENV) or "runs")


def _prepare_run_dir(out: str | None, command: str, resolved: dict) -> Path:
    root = _out_root(out)
    run_dir = root / f"{command}-{cfgmod.config_hash(resolved)[:12]}-s{resolved['seed']}"
    if run_dir.exists():
        if (run_dir / "COMPLETE").exists():
            raise click.ClickException(
                f"run directory {run_dir} already completed (write-once); "
                f"point --out at a fresh root to rerun"
            )
        raise click.ClickException(
            f"run directory {run_dir} exists but is incomplete; remove it to retry"
        )
    run_dir.mkdir(parents=True)
    (run_dir / "config.json").write_text(cfgmod.config_json(resolved))
    (run_dir / "VERSION").write_text(_version_string() + "\n")
    return run_dir


def _finish_run(run_dir: Path) -> None:
    (run_dir / "COMPLETE").write_text("ok\n")


def _load_resolved(config_path: str, seed: int | None) -> dict:
    try:
        return cfgmod.load_config(config_path, seed_override=seed)
    except cfgmod.ConfigError as exc:
        raise click.ClickException(str(exc))


def _require_dataset(path: str) -> Dataset:
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise click.ClickException(str(exc))
    except ValueError as exc:
        raise click.ClickException(f"invalid dataset: {exc}")


def _require_checkpoint(path: str | None, purpose: str):
    if path is None:
        raise click.ClickException(
            f"{purpose} needs a pretrained checkpoint; pass --checkpoint "
            f"pointing at a pretrain run's checkpoint directory"
        )
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise click.ClickException(str(exc))


def _encoder_for(resolved: dict, dataset: Dataset) -> GraphImageEncoder:
    enc_cfg = cfgmod.encoder_config(resolved, dataset.atlas.n_rois, dataset.atlas.shape)
    return GraphImageEncoder(enc_cfg, seed=resolved["seed"])


config_opt = click.option("--config", "config_path", required=True,
                          type=click.Path(exists=True, dir_okay=False),
                          help="YAML experiment configuration.")
seed_opt = click.option("--seed", type=int, default=None,
                        help="Override the config seed.")
out_opt = click.option("--out", type=click.Path(file_okay=False), default=None,
                       help=f"Output root (default: ${OUT_ENV} or ./runs).")
jobs_opt = click.option("--jobs", type=int, default=1, show_default=True,
                        help="Fold-level parallelism.")
plots_opt = click.option("--plots", is_flag=True, help="Also render heatmap images.")


@click.group()
def main():
    """Self-supervised pretraining and evaluation on paired brain graph + volume data."""


@main.command()
@config_opt
@seed_opt
@out_opt
def synth(config_path, seed, out):
    """Generate a synthetic dataset with planted signals."""
    resolved = _load_resolved(config_path, seed)
    run_dir = _prepare_run_dir(out, "synth", resolved)
    dataset = generate_synthetic(cfgmod.synth_config(resolved), seed=resolved["seed"])
    save_dataset(dataset, run_dir / "dataset")
    _finish_run(run_dir)
    click.echo(f"dataset: {run_dir / 'dataset'}")


@main.command()
@config_opt
@seed_opt
@out_opt
@click.argument("raw_dir", type=click.Path(exists=True, file_okay=False))
def build(config_path, seed, out, raw_dir):
    """Build a dataset from a directory of raw voxel series (see README for the
    raw_manifest.json layout)."""
    resolved = _load_resolved(config_path, seed)
    run_dir = _prepare_run_dir(out, "build", resolved)
    dataset = _build_from_raw(Path(raw_dir), resolved)
    save_dataset(dataset, run_dir / "dataset")
    _finish_run(run_dir)
    click.echo(f"dataset: {run_dir / 'dataset'}")


def _build_from_raw(raw_dir: Path, resolved: dict) -> Dataset:
    manifest_path = raw_dir / "raw_manifest.json"
    if not manifest_path.is_file():
        raise click.ClickException(f"raw manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "brainpair.rawseries":
        raise click.ClickException(f"not a raw-series manifest: {manifest_path}")
    atlas_rec = manifest["atlas"]
    atlas = AtlasVolume(
        labels=_read_blob(raw_dir / atlas_rec["file"], atlas_rec["shape"], INT_DTYPE),
        n_rois=int(atlas_rec["n_rois"]),
    ).validate()
    g = resolved["graph"]
    instances = []
    task_ids = []
    for rec in manifest["series"]:
        series = _read_blob(raw_dir / rec["file"], rec["shape"], FLOAT_DTYPE)
        instances.append(
            build_instance(rec["subject_id"], rec["task_id"], series, atlas,
                           ridge=g["ridge"], edge_fraction=g["edge_fraction"])
        )
        if rec["task_id"] not in task_ids:
            task_ids.append(rec["task_id"])
    phenos = PhenotypeTable(
        {
            name: Phenotype(
                kind=rec["kind"],
                values={
                    s: (int(v) if rec["kind"] == "categorical" else float(v))
                    for s, v in rec["values"].items()
                },
            )
            for name, rec in manifest.get("phenotypes", {}).items()
        }
    )
    task_set = manifest.get("task_set", task_ids)
    return Dataset(instances=instances, atlas=atlas, phenotypes=phenos,
                   task_set=task_set).validate()


@main.command()
@config_opt
@seed_opt
@out_opt
@click.argument("dataset_dir", type=click.Path(exists=True))
def pretrain(config_path, seed, out, dataset_dir):
    """Self-supervised pretraining; writes a checkpoint and the training log."""
    resolved = _load_resolved(config_path, seed)
    run_dir = _prepare_run_dir(out, "pretrain", resolved)
    dataset = _require_dataset(dataset_dir)
    encoder = _encoder_for(resolved, dataset)
    predictor = build_predictor(encoder.config, seed=resolved["seed"])
    result = train_ssl(
        dataset, encoder, predictor,
        cfgmod.train_config(resolved), augment=cfgmod.augment_config(resolved),
        log_path=run_dir / "trainlog.tsv",
    )
    save_checkpoint(run_dir / "checkpoint", result.encoder, result.predictor,
                    seed=resolved["seed"],
                    meta={"epochs": resolved["train"]["epochs"]})
    _finish_run(run_dir)
    click.echo(f"checkpoint: {run_dir / 'checkpoint'}")


def _run_downstream(mode, config_path, seed, out, jobs, dataset_dir, checkpoint):
    resolved = _load_resolved(config_path, seed)
    run_dir = _prepare_run_dir(out, mode, resolved)
    dataset = _require_dataset(dataset_dir)
    d = resolved["downstream"]
    folds = make_folds(dataset, d["k_folds"], stratify=d["stratify"], seed=resolved["seed"])

    encoder = None
    model_config = None
    if mode in ("probe", "finetune"):
        encoder, _, _ = _require_checkpoint(checkpoint, f"mode {mode!r}")
    else:
        model_config = cfgmod.encoder_config(resolved, dataset.atlas.n_rois, dataset.atlas.shape)

    report = run_cv(dataset, folds, mode, d["phenotype"],
                    cfgmod.downstream_config(resolved), encoder=encoder,
                    model_config=model_config, jobs=jobs)
    table = report.to_table()
    (run_dir / "metrics.tsv").write_text(table)
    _finish_run(run_dir)
    click.echo(table, nl=False)
    click.echo(f"metrics: {run_dir / 'metrics.tsv'}")


@main.command()
@config_opt
@seed_opt
@out_opt
@jobs_opt
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(exists=True), default=None,
              help="Pretrained checkpoint directory.")
def probe(config_path, seed, out, jobs, dataset_dir, checkpoint):
    """Cross-validated MLP probing of a frozen pretrained encoder."""
    _run_downstream("probe", config_path, seed, out, jobs, dataset_dir, checkpoint)


@main.command()
@config_opt
@seed_opt
@out_opt
@jobs_opt
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(exists=True), default=None,
              help="Pretrained checkpoint directory.")
def finetune(config_path, seed, out, jobs, dataset_dir, checkpoint):
    """Cross-validated end-to-end fine-tuning from a pretrained checkpoint."""
    _run_downstream("finetune", config_path, seed, out, jobs, dataset_dir, checkpoint)


@main.command()
@config_opt
@seed_opt
@out_opt
@jobs_opt
@click.argument("dataset_dir", type=click.Path(exists=True))
def supervised(config_path, seed, out, jobs, dataset_dir):
    """Cross-validated supervised-from-scratch baseline (same architecture)."""
    _run_downstream("supervised", config_path, seed, out, jobs, dataset_dir, None)


@main.command()
@config_opt
@seed_opt
@out_opt
@plots_opt
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(exists=True), default=None,
              help="Pretrained checkpoint directory.")
def correlate(config_path, seed, out, plots, dataset_dir, checkpoint):
    """Zero-shot max-correlation scan of embedding channels vs. FC entries,
    per held-out fold."""
    resolved = _load_resolved(config_path, seed)
    run_dir = _prepare_run_dir(out, "correlate", resolved)
    dataset = _require_dataset(dataset_dir)
    encoder, _, _ = _require_checkpoint(checkpoint, "correlate")
    d = resolved["downstream"]
    folds = make_folds(dataset, d["k_folds"], stratify=d["stratify"], seed=resolved["seed"])

    embeddings = embed_instances(encoder, dataset.instances)
    subject_emb, subject_fc = _subject_level_views(dataset, embeddings)

    table: dict[str, dict] = {}
    for name in resolved["analysis"]["phenotypes"]:
        emb_rs, fc_rs = [], []
        for f in range(folds.k):
            _, test_subjects = folds.train_test_subjects(f)
            y = np.array([dataset.phenotypes.value(name, s) for s in test_subjects])
            emb = np.stack([subject_emb[s] for s in test_subjects])
            fc = np.stack([subject_fc[s] for s in test_subjects])
            r_emb, _ = max_channel_correlation(emb, y)
            r_fc, _ = max_fc_correlation(fc, y)
            emb_rs.append(r_emb)
            fc_rs.append(r_fc)
        table[name] = {"embedding": emb_rs, "fc": fc_rs}

    written = export_report(table, None, run_dir, plots=plots)
    _finish_run(run_dir)
    for path in written:
        click.echo(f"wrote: {path}")


def _subject_level_views(dataset: Dataset, embeddings: np.ndarray):
    """Mean embedding and mean Pearson matrix per subject (across tasks)."""
    emb_by, fc_by = {}, {}
    for inst, emb in zip(dataset.instances, embeddings):
        emb_by.setdefault(inst.subject_id, []).append(emb)
        fc_by.setdefault(inst.subject_id, []).append(np.asarray(inst.graph.node_features, dtype=np.float64))
    subject_emb = {s: np.mean(np.stack(v), axis=0) for s, v in emb_by.items()}
    subject_fc = {s: np.mean(np.stack(v), axis=0) for s, v in fc_by.items()}
    return subject_emb, subject_fc


@main.command(name="explain")
@config_opt
@seed_opt
@out_opt
@plots_opt
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(exists=True), default=None,
              help="Pretrained checkpoint directory.")
def explain_cmd(config_path, seed, out, plots, dataset_dir, checkpoint):
    """Per-region importance maps: for reproducing the embedding, and for each
    configured downstream task (probe heads trained per fold)."""
    resolved = _load_resolved(config_path, seed)
    run_dir = _prepare_run_dir(out, "explain", resolved)
    dataset = _require_dataset(dataset_dir)
    encoder, _, _ = _require_checkpoint(checkpoint, "explain")
    d = resolved["downstream"]
    folds = make_folds(dataset, d["k_folds"], stratify=d["stratify"], seed=resolved["seed"])
    ex_cfg = cfgmod.explain_config(resolved)
    limit = resolved["analysis"]["explain_instances_per_fold"]
    ds_cfg = cfgmod.downstream_config(resolved)

    embeddings = embed_instances(encoder, dataset.instances)
    index_of = {id(inst): i for i, inst in enumerate(dataset.instances)}

    importances: dict[str, np.ndarray] = {}
    emb_maps = []
    for f in range(folds.k):
        _, test_subjects = folds.train_test_subjects(f)
        insts = _fold_instances(dataset, test_subjects, limit)
        for inst in insts:
            emb_maps.append(explain(encoder, inst, dataset.atlas, ex_cfg,
                                    mode="embedding", scope="embedding", fold=f))
    importances["embedding"] = aggregate_importance(emb_maps)

    for name in resolved["analysis"]["phenotypes"]:
        kind = "classification" if dataset.phenotypes.kind(name) == "categorical" else "regression"
        maps = []
        for f in range(folds.k):
            train_subjects, test_subjects = folds.train_test_subjects(f)
            train_insts = [i for i in dataset.instances if i.subject_id in set(train_subjects)]
            labels_by_subject = {s: dataset.phenotypes.value(name, s) for s in dataset.subjects()}
            labels = _labels_for(train_insts, labels_by_subject, kind)
            fitted = make_fitted_head(encoder.config, kind, labels, ds_cfg, (resolved["seed"], f))
            emb_train = embeddings[[index_of[id(i)] for i in train_insts]]
            train_probe(encoder, fitted, train_insts, labels_by_subject, ds_cfg,
                        embeddings=emb_train, seed_key=(resolved["seed"], f))
            for inst in _fold_instances(dataset, test_subjects, limit):
                maps.append(explain(encoder, inst, dataset.atlas, ex_cfg,
                                    mode="prediction", fitted=fitted, scope=name, fold=f))
        importances[name] = aggregate_importance(maps)

    written = export_report(None, importances, run_dir, plots=plots)
    _finish_run(run_dir)
    for path in written:
        click.echo(f"wrote: {path}")


def _fold_instances(dataset: Dataset, subjects: list[str], limit: int):
    insts = [i for i in dataset.instances if i.subject_id in set(subjects)]
    return insts[:limit] if limit else insts


if __name__ == "__main__":
    sys.exit(main())
