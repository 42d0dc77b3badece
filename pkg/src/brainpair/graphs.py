"""Construction of the two complementary data views.

From one voxel time series we build (a) the functional brain graph -
Pearson-correlation rows as node features plus the strongest 5% (by
absolute value) of the partial-correlation coefficients as signed
weighted edges - and (b) the mean-activation volume, the voxel-wise
time average.
"""

from __future__ import annotations

import math

import numpy as np

from .data import AtlasVolume, BrainGraph, TaskInstance, extract_roi_series, warn_zero_variance

DEFAULT_EDGE_FRACTION = 0.05
DEFAULT_RIDGE = 1e-3


def pearson_matrix(series: np.ndarray) -> np.ndarray:
    """Pearson correlation between columns of a (T, n) series.

    Zero-variance columns yield an all-zero row/column (diagonal included)
    rather than NaN, keeping downstream tensors finite; a RuntimeWarning
    flags them.  Non-degenerate diagonals are exactly 1.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"series must be 2D (T, n), got {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 frames for correlation")
    if not np.isfinite(x).all():
        raise ValueError("series contains non-finite values")

    degenerate = x.max(axis=0) == x.min(axis=0)
    xc = x - x.mean(axis=0)
    norms = np.sqrt((xc * xc).sum(axis=0))
    degenerate |= norms == 0
    if degenerate.any():
        warn_zero_variance("pearson_matrix", np.flatnonzero(degenerate))
    safe = np.where(degenerate, 1.0, norms)

    cov = xc.T @ xc
    cov = (cov + cov.T) / 2.0
    r = cov / np.outer(safe, safe)
    np.fill_diagonal(r, 1.0)
    r[degenerate, :] = 0.0
    r[:, degenerate] = 0.0
    return np.clip(r, -1.0, 1.0)


def partial_corr_matrix(series: np.ndarray, ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    """Partial correlations via a ridge-regularized precision matrix.

    The sample covariance C is shrunk to ``C + ridge * mean(diag(C)) * I``
    before inversion; entries are ``-Omega_ij / sqrt(Omega_ii * Omega_jj)``
    with a unit diagonal by convention, clamped to [-1, 1].  ``ridge`` is
    relative to the mean variance, so the result is invariant to the
    covariance normalization.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"series must be 2D (T, n), got {x.shape}")
    t_total, n = x.shape
    if t_total < 2:
        raise ValueError("need at least 2 frames for partial correlation")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if not np.isfinite(x).all():
        raise ValueError("series contains non-finite values")
    if ridge == 0 and t_total <= n:
        raise ValueError(
            f"covariance of a T={t_total}, n={n} series is singular; use a positive ridge"
        )

    cov = np.cov(x, rowvar=False)
    cov = np.atleast_2d(cov)
    scale = float(np.mean(np.diag(cov)))
    reg = cov + ridge * scale * np.eye(n)
    try:
        omega = np.linalg.inv(reg)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"regularized covariance not invertible ({exc}); increase ridge") from exc
    residual = np.abs(reg @ omega - np.eye(n)).max()
    if not np.isfinite(omega).all() or residual > 1e-6:
        raise ValueError(
            "regularized covariance is numerically singular; use a positive ridge"
        )

    d = np.sqrt(np.diag(omega))
    p = -omega / np.outer(d, d)
    p = (p + p.T) / 2.0
    np.fill_diagonal(p, 1.0)
    return np.clip(p, -1.0, 1.0)


def threshold_edges(pcorr: np.ndarray, fraction: float = DEFAULT_EDGE_FRACTION) -> tuple[np.ndarray, np.ndarray]:
    """Retain the strongest-|value| upper-triangle entries as signed edges.

    Keeps ``ceil(fraction * n(n-1)/2)`` of the nonzero candidates (fewer if
    not enough candidates exist).  Ties on |value| break by ascending (i, j);
    the returned edges are sorted by (i, j), so the result is independent of
    candidate evaluation order.  Returns (edge_index (m, 2), edge_weight (m,)).
    """
    p = np.asarray(pcorr, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError(f"matrix must be square, got {p.shape}")
    if np.abs(p - p.T).max(initial=0.0) > 1e-9:
        raise ValueError("matrix is asymmetric beyond 1e-9")
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")

    n = p.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    vals = p[iu, ju]
    nz = vals != 0.0
    iu, ju, vals = iu[nz], ju[nz], vals[nz]

    cap = math.ceil(fraction * n * (n - 1) / 2)
    m = min(cap, vals.size)
    if m == 0:
        return np.empty((0, 2), dtype=np.int64), np.empty(0, dtype=np.float64)

    order = np.lexsort((ju, iu, -np.abs(vals)))[:m]
    sel_i, sel_j, sel_w = iu[order], ju[order], vals[order]
    final = np.lexsort((sel_j, sel_i))
    edge_index = np.stack([sel_i[final], sel_j[final]], axis=1).astype(np.int64)
    return edge_index, sel_w[final]


def mean_image(series: np.ndarray) -> np.ndarray:
    """Voxel-wise time average of a (T, X, Y, Z) series."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 4:
        raise ValueError(f"voxel series must be 4D, got {series.shape}")
    if series.shape[0] < 1:
        raise ValueError("need at least one frame")
    if not np.isfinite(series).all():
        raise ValueError("series contains non-finite values")
    return series.mean(axis=0)


def build_graph(roi_series: np.ndarray, ridge: float = DEFAULT_RIDGE,
                edge_fraction: float = DEFAULT_EDGE_FRACTION) -> BrainGraph:
    node_features = pearson_matrix(roi_series)
    pcorr = partial_corr_matrix(roi_series, ridge=ridge)
    edge_index, edge_weight = threshold_edges(pcorr, fraction=edge_fraction)
    n = node_features.shape[0]
    return BrainGraph(
        n=n, node_features=node_features, edge_index=edge_index, edge_weight=edge_weight
    ).validate()


def build_instance(subject_id: str, task_id: str, series: np.ndarray, atlas: AtlasVolume,
                   ridge: float = DEFAULT_RIDGE,
                   edge_fraction: float = DEFAULT_EDGE_FRACTION) -> TaskInstance:
    """Compose ROI extraction, graph construction, and the mean image into one
    task instance; each sub-operation's contract applies unchanged."""
    roi_series = extract_roi_series(series, atlas)
    graph = build_graph(roi_series, ridge=ridge, edge_fraction=edge_fraction)
    image = mean_image(series)
    return TaskInstance(
        subject_id=subject_id, task_id=task_id, graph=graph, image=image
    ).validate(atlas)
