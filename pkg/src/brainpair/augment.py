"""Stochastic view sampling: node masking, edge dropout, region-aligned
graph-image masking (hard and soft), and the optional standard image
augmentations used only for ablation.

Every operator is split into a draw step and a pure apply step; the draws
are recorded in a :class:`Provenance` so any sampled view can be replayed
bit-identically from its source instance.  Masking is implemented as
multiplication by indicator vectors, which is what makes the hard and soft
region-aligned operators bit-exactly consistent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, concat
from .data import AtlasVolume, BrainGraph, TaskInstance


@dataclass
class AugmentConfig:
    p_node_mask: float = 0.5
    p_edge_drop: float = 0.5
    p_roi_mask: float = 0.1
    image_aug_enabled: bool = False        # ablation only
    per_dimension_node_mask: bool = False  # attribute-style masking variant

    def validate(self) -> "AugmentConfig":
        for name in ("p_node_mask", "p_edge_drop", "p_roi_mask"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        return self


@dataclass
class ImageAugRecord:
    flip: bool
    flip_axis: int
    rotate: bool
    rot_axes: tuple[int, int]
    intensity: bool
    scale: float
    shift_frac: float


@dataclass
class Provenance:
    """Record of every draw needed to reproduce a sampled view."""

    node_mask: np.ndarray            # bool (n,), True = feature row zeroed
    node_dim_mask: np.ndarray | None  # bool (n, n) when per-dimension masking is on
    edge_keep: np.ndarray            # bool (m_source,)
    roi_mask: np.ndarray             # bool (n,), True = region occluded
    image_ops: ImageAugRecord | None


@dataclass
class AugmentedView:
    graph: BrainGraph
    image: np.ndarray
    subject_id: str
    task_id: str
    provenance: Provenance | None


# ---------------------------------------------------------------------------
# individual operators
# ---------------------------------------------------------------------------

def _mask_rows(node_features: np.ndarray, selected: np.ndarray) -> np.ndarray:
    keep = (~selected).astype(node_features.dtype)
    return node_features * keep[:, None]


def mask_node_features(graph: BrainGraph, p: float, rng: np.random.Generator,
                       per_dimension: bool = False) -> tuple[BrainGraph, np.ndarray]:
    """Zero whole node feature rows, each selected independently with
    probability p; edges are untouched.  Returns (masked graph, selected)."""
    if not (0.0 <= p <= 1.0):
        raise ValueError("p must be in [0, 1]")
    if per_dimension:
        sel = rng.random((graph.n, graph.node_features.shape[1])) < p
        nf = graph.node_features * (~sel).astype(graph.node_features.dtype)
    else:
        sel = rng.random(graph.n) < p
        nf = _mask_rows(graph.node_features, sel)
    out = BrainGraph(
        n=graph.n, node_features=nf,
        edge_index=graph.edge_index.copy(), edge_weight=graph.edge_weight.copy(),
    )
    return out, sel


def dropout_edges(graph: BrainGraph, p: float, rng: np.random.Generator) -> tuple[BrainGraph, np.ndarray]:
    """Remove each edge independently with probability p; node features untouched."""
    if not (0.0 <= p <= 1.0):
        raise ValueError("p must be in [0, 1]")
    m = graph.edge_index.shape[0]
    keep = rng.random(m) >= p
    out = BrainGraph(
        n=graph.n, node_features=graph.node_features.copy(),
        edge_index=graph.edge_index[keep], edge_weight=graph.edge_weight[keep],
    )
    return out, keep


def _voxel_scale_index(atlas: AtlasVolume) -> np.ndarray:
    """Flat voxel -> index into an (n+1,)-long scale vector; background maps to
    the trailing slot, which always holds 1."""
    labels = atlas.labels.reshape(-1)
    return np.where(labels > 0, labels - 1, atlas.n_rois)


def _apply_roi_scale(node_features: np.ndarray, image: np.ndarray,
                     atlas: AtlasVolume, scale: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scale = np.asarray(scale, dtype=np.float64)
    nf = node_features * scale.astype(node_features.dtype)[:, None]
    ext = np.concatenate([scale, [1.0]]).astype(image.dtype)
    img = image * ext[_voxel_scale_index(atlas)].reshape(atlas.shape)
    return nf, img


def roi_aligned_mask(graph: BrainGraph, image: np.ndarray, atlas: AtlasVolume,
                     p: float, rng: np.random.Generator,
                     selected: np.ndarray | None = None,
                     ) -> tuple[BrainGraph, np.ndarray, np.ndarray]:
    """Jointly occlude regions in both views: each region selected independently
    with probability p has its node feature row zeroed and every voxel carrying
    its atlas label zeroed.  Edges and background voxels are never touched.
    Pass ``selected`` to force a specific region set (tests, replay).
    """
    if graph.n != atlas.n_rois:
        raise ValueError(f"graph has {graph.n} nodes, atlas has {atlas.n_rois} regions")
    if np.asarray(image).shape != atlas.shape:
        raise ValueError(f"image shape {np.asarray(image).shape} != atlas shape {atlas.shape}")
    if selected is None:
        if not (0.0 <= p <= 1.0):
            raise ValueError("p must be in [0, 1]")
        selected = rng.random(graph.n) < p
    selected = np.asarray(selected, dtype=bool)
    keep = (~selected).astype(np.float64)
    nf, img = _apply_roi_scale(graph.node_features, image, atlas, keep)
    out = BrainGraph(
        n=graph.n, node_features=nf,
        edge_index=graph.edge_index.copy(), edge_weight=graph.edge_weight.copy(),
    )
    return out, img, selected


def soft_roi_mask(graph: BrainGraph, image: np.ndarray, atlas: AtlasVolume, m):
    """Scale node feature rows and the matching voxels by a per-region factor
    in [0, 1].  With an ndarray ``m`` this returns (BrainGraph, ndarray); with
    a :class:`Tensor` it returns (Tensor, Tensor) and is differentiable in m
    (the explainer's path).  ``m`` of all ones is the identity; an indicator
    complement reproduces the hard mask bit-exactly.
    """
    if graph.n != atlas.n_rois:
        raise ValueError(f"graph has {graph.n} nodes, atlas has {atlas.n_rois} regions")
    if isinstance(m, Tensor):
        _check_mask_range(m.data, graph.n)
        return soft_roi_mask_tensors(
            as_tensor(graph.node_features), as_tensor(np.asarray(image)), atlas, m
        )
    m = np.asarray(m, dtype=np.float64)
    _check_mask_range(m, graph.n)
    nf, img = _apply_roi_scale(graph.node_features, image, atlas, m)
    out = BrainGraph(
        n=graph.n, node_features=nf,
        edge_index=graph.edge_index.copy(), edge_weight=graph.edge_weight.copy(),
    )
    return out, img


def _check_mask_range(m: np.ndarray, n: int) -> None:
    m = np.asarray(m)
    if m.shape != (n,):
        raise ValueError(f"mask must have shape ({n},), got {m.shape}")
    if (m < 0).any() or (m > 1).any():
        raise ValueError("mask values must lie in [0, 1]")


def soft_roi_mask_tensors(node_features: Tensor, image: Tensor,
                          atlas: AtlasVolume, m: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable core of :func:`soft_roi_mask` on autodiff tensors."""
    n = atlas.n_rois
    nf = node_features * m.reshape(n, 1)
    ones = as_tensor(np.ones(1, dtype=m.data.dtype))
    ext = concat([m, ones], axis=0)
    img = image * ext[_voxel_scale_index(atlas)].reshape(atlas.shape)
    return nf, img


def draw_image_ops(image_std: float, rng: np.random.Generator) -> ImageAugRecord:
    """Draw the ablation-only image augmentation; all parameters are drawn
    unconditionally (fixed draw count) so replay never desynchronizes."""
    gates = rng.random(3) < 0.5
    flip_axis = int(rng.integers(3))
    pair_idx = int(rng.integers(3))
    rot_axes = ((0, 1), (0, 2), (1, 2))[pair_idx]
    scale = float(rng.uniform(0.9, 1.1))
    shift_frac = float(rng.uniform(-0.1, 0.1))
    return ImageAugRecord(
        flip=bool(gates[0]), flip_axis=flip_axis,
        rotate=bool(gates[1]), rot_axes=rot_axes,
        intensity=bool(gates[2]), scale=scale, shift_frac=shift_frac,
    )


def apply_image_ops(image: np.ndarray, rec: ImageAugRecord) -> np.ndarray:
    out = np.asarray(image)
    sd = float(out.std())
    if rec.flip:
        out = np.flip(out, axis=rec.flip_axis)
    if rec.rotate:
        out = np.rot90(out, k=1, axes=rec.rot_axes)
    if rec.intensity:
        out = out * rec.scale + rec.shift_frac * sd
    return np.ascontiguousarray(out)


def image_augment(image: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, ImageAugRecord]:
    """Standard image augmentation (ablation only): axis flip, 90-degree
    rotation, and intensity scale/shift, each gated with probability 0.5."""
    rec = draw_image_ops(float(np.asarray(image).std()), rng)
    return apply_image_ops(image, rec), rec


# ---------------------------------------------------------------------------
# full view sampling
# ---------------------------------------------------------------------------

def augment_view(instance: TaskInstance, config: AugmentConfig,
                 rng: np.random.Generator, atlas: AtlasVolume) -> AugmentedView:
    """Sample one augmented view of an instance.

    Draw order from ``rng`` (fixed, so a seeded stream fully determines the
    view): node selectors, edge keep mask, region selectors, then image-op
    draws when enabled.  Operators apply in that same order.
    """
    config.validate()
    graph, node_sel = mask_node_features(
        instance.graph, config.p_node_mask, rng,
        per_dimension=config.per_dimension_node_mask,
    )
    graph, edge_keep = dropout_edges(graph, config.p_edge_drop, rng)
    graph, image, roi_sel = roi_aligned_mask(graph, instance.image, atlas, config.p_roi_mask, rng)
    image_rec = None
    if config.image_aug_enabled:
        image, image_rec = image_augment(image, rng)

    if config.per_dimension_node_mask:
        prov = Provenance(
            node_mask=node_sel.any(axis=1), node_dim_mask=node_sel,
            edge_keep=edge_keep, roi_mask=roi_sel, image_ops=image_rec,
        )
    else:
        prov = Provenance(
            node_mask=node_sel, node_dim_mask=None,
            edge_keep=edge_keep, roi_mask=roi_sel, image_ops=image_rec,
        )
    return AugmentedView(
        graph=graph, image=image,
        subject_id=instance.subject_id, task_id=instance.task_id, provenance=prov,
    )


def apply_provenance(instance: TaskInstance, prov: Provenance,
                     atlas: AtlasVolume) -> AugmentedView:
    """Replay a recorded view bit-identically from its source instance."""
    if prov.node_dim_mask is not None:
        nf = instance.graph.node_features * (~prov.node_dim_mask).astype(
            instance.graph.node_features.dtype
        )
    else:
        nf = _mask_rows(instance.graph.node_features, prov.node_mask)
    graph = BrainGraph(
        n=instance.graph.n, node_features=nf,
        edge_index=instance.graph.edge_index[prov.edge_keep],
        edge_weight=instance.graph.edge_weight[prov.edge_keep],
    )
    graph, image, _ = roi_aligned_mask(
        graph, instance.image, atlas, 0.0,
        rng=np.random.default_rng(0), selected=prov.roi_mask,
    )
    if prov.image_ops is not None:
        image = apply_image_ops(image, prov.image_ops)
    return AugmentedView(
        graph=graph, image=image,
        subject_id=instance.subject_id, task_id=instance.task_id, provenance=prov,
    )


def identity_view(instance: TaskInstance) -> AugmentedView:
    """Wrap an instance as an un-augmented view (evaluation paths)."""
    return AugmentedView(
        graph=instance.graph, image=np.asarray(instance.image),
        subject_id=instance.subject_id, task_id=instance.task_id, provenance=None,
    )
