"""Synthetic datasets with planted, recoverable structure.

The generator stands in for restricted in-vivo cohorts: region series come
from a two-community latent-factor covariance, a binary group flips the
cross-community coupling sign for a designated region subset (the planted
classification signal), a continuous score follows one region's baseline
amplitude (the planted regression signal, visible in the mean-activation
image), and every task contributes its own additive component so tasks are
distinguishable.  Ground truth is recorded in the dataset manifest so
acceptance tests can check recovery.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AtlasVolume, Dataset, Phenotype, PhenotypeTable
from .graphs import build_instance

CLASS_PHENOTYPE = "group"
SCORE_PHENOTYPE = "score"


@dataclass
class SynthConfig:
    n_subjects: int = 24
    n_tasks: int = 4
    n_rois: int = 12
    volume_shape: tuple[int, int, int] = (16, 16, 16)
    t_frames: int = 64
    class_fraction: float = 0.5
    signal_strength: float = 1.0
    voxel_noise: float = 0.3
    ridge: float = 1e-3
    edge_fraction: float = 0.05
    # latent-factor loadings: community, global, private
    loadings: tuple[float, float, float] = field(default=(1.0, 0.5, 0.8))

    def validate(self) -> "SynthConfig":
        if self.n_subjects < 1 or self.n_tasks < 1:
            raise ValueError("need at least one subject and one task")
        if self.t_frames < 2:
            raise ValueError("t_frames must be >= 2")
        if self.n_rois < 2:
            raise ValueError("n_rois must be >= 2")
        if not (0.0 <= self.class_fraction <= 1.0):
            raise ValueError("class_fraction must be in [0, 1]")
        shape = tuple(self.volume_shape)
        if len(shape) != 3 or min(shape) < 3:
            raise ValueError("volume_shape must be 3 dims of size >= 3")
        interior = int(np.prod([s - 2 for s in shape]))
        if self.n_rois > interior:
            raise ValueError(
                f"n_rois={self.n_rois} exceeds the {interior} interior voxels of {shape}"
            )
        return self

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "n_tasks": self.n_tasks,
            "n_rois": self.n_rois,
            "volume_shape": list(self.volume_shape),
            "t_frames": self.t_frames,
            "class_fraction": self.class_fraction,
            "signal_strength": self.signal_strength,
            "voxel_noise": self.voxel_noise,
            "ridge": self.ridge,
            "edge_fraction": self.edge_fraction,
            "loadings": list(self.loadings),
        }


def make_block_atlas(volume_shape: tuple[int, int, int], n_rois: int) -> AtlasVolume:
    """Partition the interior of the volume into n contiguous slabs; a one-voxel
    border stays background (label 0)."""
    shape = tuple(volume_shape)
    labels = np.zeros(shape, dtype=np.int32)
    interior = np.ones([s - 2 for s in shape], dtype=bool)
    coords = np.argwhere(interior) + 1
    flat_order = np.ravel_multi_index(coords.T, shape)
    order = np.argsort(flat_order, kind="stable")
    chunks = np.array_split(order, n_rois)
    for roi, chunk in enumerate(chunks, start=1):
        pts = coords[chunk]
        labels[pts[:, 0], pts[:, 1], pts[:, 2]] = roi
    return AtlasVolume(labels=labels, n_rois=n_rois).validate()


def _planted_layout(n_rois: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Community assignment, the class-signal ROI subset S, and the score ROI.

    S straddles both communities so the class-dependent coupling between its
    members is an inter-community correlation, and its flipped entries live
    only in S's own correlation rows (masking S removes the signal entirely).
    """
    half = n_rois // 2
    community = np.zeros(n_rois, dtype=int)
    community[half:] = 1
    per_side = max(1, n_rois // 6)
    class_rois = np.concatenate([np.arange(per_side), half + np.arange(per_side)])
    signal_roi = n_rois - 1                   # inside community 1, disjoint from S
    if signal_roi in class_rois:
        raise ValueError("n_rois too small to separate planted signals")
    return community, class_rois, signal_roi


def generate_synthetic(config: SynthConfig, seed: int) -> Dataset:
    """Generate a dataset with planted class / score / task structure.

    Deterministic given (config, seed): one master generator drives subject
    traits, and each (subject, task) instance gets its own child stream.
    """
    config.validate()
    n_sub, n_task, n_roi = config.n_subjects, config.n_tasks, config.n_rois
    s = float(config.signal_strength)
    a_comm, a_glob, a_priv = config.loadings

    atlas = make_block_atlas(config.volume_shape, n_roi)
    community, class_rois, signal_roi = _planted_layout(n_roi)
    s_low = class_rois[community[class_rois] == 0]   # S members in community 0
    s_high = class_rois[community[class_rois] == 1]  # S members in community 1

    master = np.random.default_rng((seed, 0xB0A1))
    subjects = [f"sub{idx:03d}" for idx in range(n_sub)]
    tasks = [f"task{j}" for j in range(n_task)]

    n_pos = int(round(config.class_fraction * n_sub))
    group = np.zeros(n_sub, dtype=int)
    group[master.permutation(n_sub)[:n_pos]] = 1
    amplitude = master.uniform(-1.0, 1.0, size=n_sub)
    score = 10.0 + 5.0 * amplitude + 0.25 * master.standard_normal(n_sub)

    roi_baseline = master.normal(0.0, 0.5, size=n_roi)       # anatomy-like DC pattern
    task_dc = master.normal(0.0, 0.4, size=(n_task, n_roi))  # task-identity DC pattern

    labels_flat = atlas.labels.reshape(-1)
    instances = []
    for si, subject in enumerate(subjects):
        for tj, task in enumerate(tasks):
            rng = np.random.default_rng((seed, 0xB0A1, si, tj))
            t_total = config.t_frames
            f_comm = rng.standard_normal((2, t_total))
            f_glob = rng.standard_normal(t_total)
            f_task = rng.standard_normal(t_total)
            f_link = rng.standard_normal(t_total)
            eta = rng.standard_normal((n_roi, t_total))

            roi_series = (
                a_comm * f_comm[community]
                + a_glob * f_glob
                + a_priv * eta
                + 0.3 * f_task
            )
            # class signal: S's two halves share an extra factor whose sign on
            # the community-1 half depends on the group, flipping the
            # inter-community correlation between S's members
            sign = 1.0 if group[si] == 1 else -1.0
            roi_series[s_low] += s * f_link
            roi_series[s_high] += sign * s * f_link
            # regression signal: baseline offset of one region follows the
            # subject amplitude (kept visible in the time-averaged image)
            dc = roi_baseline + task_dc[tj]
            dc = dc.copy()
            dc[signal_roi] += s * amplitude[si]

            per_voxel = np.zeros((t_total, labels_flat.size), dtype=np.float64)
            src = (roi_series + dc[:, None]).T  # (T, n)
            roi_mask = labels_flat > 0
            per_voxel[:, roi_mask] = src[:, labels_flat[roi_mask] - 1]
            per_voxel += config.voxel_noise * rng.standard_normal(per_voxel.shape)
            series = per_voxel.reshape((t_total,) + atlas.shape)

            instances.append(
                build_instance(
                    subject, task, series, atlas,
                    ridge=config.ridge, edge_fraction=config.edge_fraction,
                )
            )

    phenotypes = PhenotypeTable(
        {
            CLASS_PHENOTYPE: Phenotype(
                kind="categorical",
                values={sub: int(g) for sub, g in zip(subjects, group)},
            ),
            SCORE_PHENOTYPE: Phenotype(
                kind="continuous",
                values={sub: float(v) for sub, v in zip(subjects, score)},
            ),
        }
    )
    ground_truth = {
        "class_rois": [int(r) for r in class_rois],
        "signal_roi": int(signal_roi),
        "signal_strength": s,
        "amplitudes": {sub: float(a) for sub, a in zip(subjects, amplitude)},
        "config": config.to_dict(),
        "seed": int(seed),
    }
    return Dataset(
        instances=instances,
        atlas=atlas,
        phenotypes=phenotypes,
        task_set=tasks,
        ground_truth=ground_truth,
    ).validate()
