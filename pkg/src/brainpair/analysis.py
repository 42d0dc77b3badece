"""Zero-shot correlation analysis and the joint graph-image explainer.

The correlation scan asks whether any single embedding channel (or any
functional-connectivity entry) tracks a phenotype.  The explainer optimizes
a per-region soft mask, applied jointly to node feature rows and the
matching image voxels, to find the regions a frozen model relies on - for
reproducing its own prediction, or for reproducing the embedding itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import soft_roi_mask_tensors
from .autodiff import Tensor, as_tensor
from .data import AtlasVolume, TaskInstance
from .downstream import CLASSIFICATION, FittedHead
from .model import GraphImageEncoder
from .nn import SGD, param_hash


@dataclass
class ExplainConfig:
    iterations: int = 100
    step_size: float = 0.01
    sparsity_weight: float = 0.05   # pulls mean mask value down
    entropy_weight: float = 0.1     # pushes mask entries toward 0/1
    mask_init: float = 0.9          # initial mask value in probability space

    def validate(self) -> "ExplainConfig":
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if min(self.step_size, self.sparsity_weight, self.entropy_weight) < 0:
            raise ValueError("step size and penalty weights must be non-negative")
        if not (0.0 < self.mask_init < 1.0):
            raise ValueError("mask_init must be in (0, 1)")
        return self


@dataclass
class ImportanceMap:
    values: np.ndarray  # (n,) in [0, 1]
    scope: str          # "embedding" or a task/phenotype name
    fold: int = 0

    def validate(self) -> "ImportanceMap":
        v = np.asarray(self.values)
        if v.ndim != 1 or not np.isfinite(v).all():
            raise ValueError("importance values must be a finite 1D vector")
        return self


# ---------------------------------------------------------------------------
# correlation scans
# ---------------------------------------------------------------------------

def _column_correlations(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pearson r of every column of x against y; zero-variance columns -> NaN."""
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    xn = np.sqrt((xc * xc).sum(axis=0))
    yn = np.sqrt((yc * yc).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (xc.T @ yc) / (xn * yn)
    r[xn == 0] = np.nan
    if yn == 0:
        raise ValueError("phenotype has zero variance")
    return r


def max_channel_correlation(embeddings: np.ndarray, phenotype: np.ndarray) -> tuple[float, int]:
    """Signed Pearson r of the channel with the largest |r|, and its index.

    Zero-variance channels are skipped; in an all-degenerate matrix the scan
    is an error.  Needs at least 3 subjects.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(phenotype, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("embeddings must be (subjects, d) aligned with phenotype")
    if x.shape[0] < 3:
        raise ValueError("need at least 3 subjects")
    r = _column_correlations(x, y)
    if np.isnan(r).all():
        raise ValueError("all channels have zero variance")
    best = int(np.nanargmax(np.abs(r)))
    return float(r[best]), best


def max_fc_correlation(fc_matrices: np.ndarray, phenotype: np.ndarray) -> tuple[float, tuple[int, int]]:
    """Same scan over strict upper-triangle functional-connectivity entries."""
    fc = np.asarray(fc_matrices, dtype=np.float64)
    if fc.ndim != 3 or fc.shape[1] != fc.shape[2]:
        raise ValueError("fc_matrices must be (subjects, n, n)")
    n = fc.shape[1]
    iu, ju = np.triu_indices(n, k=1)
    flat = fc[:, iu, ju]
    r_val, idx = max_channel_correlation(flat, phenotype)
    return r_val, (int(iu[idx]), int(ju[idx]))


# ---------------------------------------------------------------------------
# the explainer
# ---------------------------------------------------------------------------

def _entropy(m: Tensor, eps: float = 1e-8) -> Tensor:
    mc = m * (1 - 2 * eps) + eps  # keep logs finite at the 0/1 ends
    return -(mc * mc.log()) - ((1.0 - mc) * (1.0 - mc).log())


def explain(encoder: GraphImageEncoder, instance: TaskInstance, atlas: AtlasVolume,
            config: ExplainConfig | None = None, mode: str = "embedding",
            fitted: FittedHead | None = None, scope: str | None = None,
            fold: int = 0) -> ImportanceMap:
    """Optimize a per-region soft mask; high surviving mask value = important.

    The mask scales node feature rows and the matching voxels jointly
    (gradient reaches both branches).  Objective: fidelity
    + sparsity_weight * mean(m) + entropy_weight * mean(H(m)), minimized by
    plain gradient steps on the mask logits; the model is frozen throughout.

    mode "prediction" preserves the model's own output through the fitted
    head (cross-entropy against its unmasked hard prediction; squared
    difference for regression heads); mode "embedding" preserves the
    representation (cosine distance to the unmasked embedding).
    """
    config = (config or ExplainConfig()).validate()
    if mode not in ("embedding", "prediction"):
        raise ValueError(f"unknown explain mode {mode!r}")
    if mode == "prediction" and fitted is None:
        raise ValueError("prediction mode requires a fitted head")
    guard = param_hash(encoder)
    encoder.eval()
    n = atlas.n_rois

    base_z = encoder.encode_views([instance]).data[0]
    if mode == "prediction":
        base_out = fitted.head.forward(Tensor(fitted.transform_inputs(base_z[None, :]))).data[0]
        hard_label = int(np.argmax(base_out)) if fitted.kind == CLASSIFICATION else None

    theta = Tensor(
        np.full(n, np.log(config.mask_init / (1 - config.mask_init)), dtype=np.float64),
        requires_grad=True,
    )
    nf_const = as_tensor(np.asarray(instance.graph.node_features, dtype=np.float64))
    img_const = as_tensor(np.asarray(instance.image, dtype=np.float64))

    for _ in range(config.iterations):
        m = theta.sigmoid()
        nf_masked, img_masked = soft_roi_mask_tensors(nf_const, img_const, atlas, m)
        masked = _masked_instance_view(instance, nf_masked, img_masked)
        z = _encode_tensor_view(encoder, masked)

        if mode == "embedding":
            zn = (z * z).sum().sqrt() + 1e-12
            cos = (z * base_z).sum() / (zn * float(np.linalg.norm(base_z) + 1e-12))
            fidelity = 1.0 - cos
        else:
            zh = z.reshape(1, -1)
            if fitted.input_mean is not None:
                zh = (zh - fitted.input_mean) * (1.0 / fitted.input_std)
            out = fitted.head.forward(zh)
            if fitted.kind == CLASSIFICATION:
                shift = out.max(axis=-1, keepdims=True).detach()
                lse = (out - shift).exp().sum(axis=-1, keepdims=True).log() + shift
                fidelity = -(out - lse)[0, hard_label]
            else:
                diff = out.reshape(-1) - float(base_out[0])
                fidelity = (diff * diff).sum()

        objective = fidelity + config.sparsity_weight * m.mean() \
            + config.entropy_weight * _entropy(m).mean()
        if not np.isfinite(objective.data):
            raise RuntimeError(
                f"explainer objective diverged (fidelity={float(fidelity.data)!r}, "
                f"mask range [{m.data.min()}, {m.data.max()}])"
            )
        theta.grad = None
        objective.backward()
        theta.data = theta.data - config.step_size * theta.grad

    if param_hash(encoder) != guard:
        raise RuntimeError("explainer mutated model state")
    m_final = 1.0 / (1.0 + np.exp(-theta.data))
    return ImportanceMap(values=m_final, scope=scope or mode, fold=fold).validate()


@dataclass
class _TensorView:
    graph_features: Tensor
    image: Tensor
    edge_index: np.ndarray
    edge_weight: np.ndarray
    n: int


def _masked_instance_view(instance: TaskInstance, nf: Tensor, img: Tensor) -> _TensorView:
    return _TensorView(
        graph_features=nf, image=img,
        edge_index=instance.graph.edge_index, edge_weight=instance.graph.edge_weight,
        n=instance.graph.n,
    )


def _encode_tensor_view(encoder: GraphImageEncoder, view: _TensorView) -> Tensor:
    """Single-instance encoding that keeps the autodiff path to the mask alive."""
    cfg = encoder.config
    n = cfg.n_rois
    g_in = None
    if encoder.graph_enc is not None:
        adj_w = np.zeros((1, n, n), dtype=np.float64)
        adj_m = np.zeros((1, n, n), dtype=np.float64)
        if view.edge_index.size:
            i, j = view.edge_index[:, 0], view.edge_index[:, 1]
            adj_w[0, i, j] = view.edge_weight
            adj_w[0, j, i] = view.edge_weight
            adj_m[0, i, j] = 1.0
            adj_m[0, j, i] = 1.0
        eye = np.arange(n)
        adj_w[0, eye, eye] = 1.0
        adj_m[0, eye, eye] = 1.0
        g_in = (view.graph_features.reshape(1, n, n), adj_w, adj_m)
    i_in = view.image.reshape((1,) + tuple(cfg.image_shape) + (1,)) if encoder.image_enc is not None else None
    return encoder.forward_packed(g_in, i_in).reshape(-1)


def aggregate_importance(maps: list[ImportanceMap]) -> np.ndarray:
    """Two-stage mean: within each fold across instances, then across folds."""
    if not maps:
        raise ValueError("no importance maps to aggregate")
    scopes = {m.scope for m in maps}
    if len(scopes) != 1:
        raise ValueError(f"mixed scopes in aggregation: {sorted(scopes)}")
    lengths = {len(m.values) for m in maps}
    if len(lengths) != 1:
        raise ValueError("importance maps disagree on region count")
    by_fold: dict[int, list[np.ndarray]] = {}
    for m in maps:
        by_fold.setdefault(m.fold, []).append(np.asarray(m.values, dtype=np.float64))
    fold_means = [np.mean(np.stack(v), axis=0) for _, v in sorted(by_fold.items())]
    return np.mean(np.stack(fold_means), axis=0)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def export_report(correlations: dict[str, dict] | None,
                  importances: dict[str, np.ndarray] | None,
                  out_dir: str | Path, plots: bool = False) -> list[Path]:
    """Write deterministic delimited tables (and optional heatmap images).

    ``correlations``: phenotype -> {"embedding": [per-fold r], "fc": [per-fold r]}.
    ``importances``: scope -> (n,) aggregated per-region importance.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from exc
    written: list[Path] = []

    if correlations is not None:
        k = max((len(rec.get("embedding", [])) for rec in correlations.values()), default=0)
        header = ["phenotype", "embedding_max_r", "fc_max_r"]
        header += [f"embedding_r_fold{f}" for f in range(k)]
        header += [f"fc_r_fold{f}" for f in range(k)]
        lines = ["\t".join(header)]
        for name in sorted(correlations):
            rec = correlations[name]
            emb = list(rec.get("embedding", []))
            fc = list(rec.get("fc", []))
            row = [name, _mean_repr(emb), _mean_repr(fc)]
            row += [repr(float(v)) for v in emb] + ["nan"] * (k - len(emb))
            row += [repr(float(v)) for v in fc] + ["nan"] * (k - len(fc))
            lines.append("\t".join(row))
        path = out_dir / "correlation_table.tsv"
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
        if plots and correlations:
            written.append(_heatmap(
                np.array([[abs(v) for v in correlations[p].get("embedding", [])]
                          for p in sorted(correlations)]),
                sorted(correlations), out_dir / "correlation_heatmap.png",
            ))

    if importances is not None:
        scopes = sorted(importances)
        n = len(next(iter(importances.values()))) if importances else 0
        lines = ["\t".join(["roi"] + scopes)]
        for r in range(n):
            lines.append("\t".join([str(r + 1)] + [repr(float(importances[s][r])) for s in scopes]))
        path = out_dir / "importance_table.tsv"
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
        if plots and importances:
            written.append(_heatmap(
                np.stack([importances[s] for s in scopes]),
                scopes, out_dir / "importance_heatmap.png",
            ))
    return written


def _mean_repr(values: list) -> str:
    if not values:
        return "nan"
    return repr(float(np.mean([abs(float(v)) for v in values])))


def _heatmap(matrix: np.ndarray, row_labels: list[str], path: Path) -> Path:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise RuntimeError(
            "plot output requires matplotlib (install the 'plots' extra)"
        ) from exc
    fig, ax = plt.subplots(figsize=(8, max(2, 0.4 * len(row_labels) + 1)))
    if matrix.size == 0:
        matrix = np.zeros((len(row_labels), 1))
    im = ax.imshow(np.atleast_2d(matrix), aspect="auto", cmap="viridis")
    ax.set_yticks(range(len(row_labels)), labels=row_labels, fontsize=7)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
