"""Positive-pair pretraining: the symmetric cosine objective with stopped
gradients, cross-task positive sampling, the SGD loop with its step
schedule, and collapse monitoring.

Randomness discipline: every stochastic piece of a step draws from its own
stream derived from (seed, tag, epoch, instance index[, view slot]), so a
run can be resumed at any epoch boundary, and any sampled view can be
reconstructed, without replaying global generator state.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, augment_view
from .autodiff import Tensor, as_tensor
from .data import Dataset, TaskInstance
from .model import GraphImageEncoder, Predictor
from .nn import SGD

_TAG_PERM = 21
_TAG_VIEW = 22
_TAG_CROSS = 23

NORM_EPS = 1e-12


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-5
    weight_decay: float = 1e-3
    lr_decay_gamma: float = 0.5
    lr_decay_every: int = 20
    task_invariance: bool = True
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if min(self.epochs, self.batch_size, self.lr_decay_every) < 1:
            raise ValueError("epochs, batch_size, lr_decay_every must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if not (0 < self.lr_decay_gamma <= 1):
            raise ValueError("lr_decay_gamma must be in (0, 1]")
        return self

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_gamma ** (epoch // self.lr_decay_every)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    collapse_stat: float
    lr: float
    wall_time: float


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)

    HEADER = "epoch\tmean_loss\tcollapse_stat\tlr"

    def append(self, stats: EpochStats, path: str | Path | None = None) -> None:
        self.epochs.append(stats)
        if path is not None:
            with open(path, "a") as fh:
                fh.write(self.format_row(stats) + "\n")

    @staticmethod
    def format_row(s: EpochStats) -> str:
        return f"{s.epoch}\t{s.mean_loss!r}\t{s.collapse_stat!r}\t{s.lr!r}"

    def to_text(self) -> str:
        lines = [self.HEADER] + [self.format_row(s) for s in self.epochs]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _cosine_rows(p: Tensor, z: Tensor, strict: bool) -> Tensor:
    """Row-wise cosine between predictor output p and stopped target z."""
    z = z.detach()  # the stop-gradient contract lives here
    if p.ndim == 1:
        p = p.reshape(1, -1)
    if z.ndim == 1:
        z = z.reshape(1, -1)
    pn = (p * p).sum(axis=-1).sqrt()
    zn = (z * z).sum(axis=-1).sqrt()
    if strict and ((pn.data == 0).any() or (zn.data == 0).any()):
        raise ValueError("zero vector in cosine loss (strict mode)")
    return (p * z).sum(axis=-1) / ((pn + NORM_EPS) * (zn + NORM_EPS))


def symmetric_cosine_loss(p1, z2, p2, z1, strict: bool = False) -> Tensor:
    """-0.5 cos(p1, z2) - 0.5 cos(p2, z1), averaged over batch rows.

    The z arguments are treated as constants under differentiation; norms are
    floored by 1e-12 so fully-masked degenerate views cannot produce NaN
    (strict=True turns zero vectors into errors instead).  Value in [-1, 1].
    """
    p1, z2 = as_tensor(p1), as_tensor(z2)
    p2, z1 = as_tensor(p2), as_tensor(z1)
    c1 = _cosine_rows(p1, z2, strict)
    c2 = _cosine_rows(p2, z1, strict)
    return (c1.mean() + c2.mean()) * -0.5


def total_loss(views1, views2, views_star, encoder: GraphImageEncoder,
               predictor: Predictor | None, task_invariance: bool = True,
               strict: bool = False) -> Tensor:
    """Augmentation-invariance term plus (optionally) the cross-task
    invariance term, both sharing the first view's encoding.

    ``views_star`` entries must come from the same subject as the matching
    ``views1`` entry; a different subject is an error.  Accepts single views
    or equal-length lists.  With ``predictor=None`` the representation itself
    is compared (ablation path).
    """
    loss, _ = _loss_from_views(views1, views2, views_star, encoder, predictor,
                               task_invariance=task_invariance, stop_gradient=True,
                               strict=strict)
    return loss


def _loss_from_views(views1, views2, views_star, encoder, predictor,
                     task_invariance: bool, stop_gradient: bool,
                     strict: bool = False) -> tuple[Tensor, np.ndarray]:
    """Shared loss construction; also returns the first view's embeddings
    (values only) for collapse monitoring."""
    views1 = _as_view_list(views1)
    views2 = _as_view_list(views2)
    if len(views1) != len(views2):
        raise ValueError("view lists must have equal length")
    sym = symmetric_cosine_loss if stop_gradient else _live_symmetric

    z1 = encoder.encode_views(views1)
    z2 = encoder.encode_views(views2)
    p1 = predictor.forward(z1) if predictor is not None else z1
    p2 = predictor.forward(z2) if predictor is not None else z2
    loss = sym(p1, z2, p2, z1, strict=strict)

    if task_invariance:
        if views_star is None:
            raise ValueError("task invariance enabled but no cross-task views given")
        views_star = _as_view_list(views_star)
        if len(views_star) != len(views1):
            raise ValueError("view lists must have equal length")
        for v1, vs in zip(views1, views_star):
            if vs.subject_id != v1.subject_id:
                raise ValueError(
                    f"cross-task view subject {vs.subject_id!r} does not match {v1.subject_id!r}"
                )
        zs = encoder.encode_views(views_star)
        ps = predictor.forward(zs) if predictor is not None else zs
        loss = loss + sym(p1, zs, ps, z1, strict=strict)
    return loss, z1.data


def _as_view_list(v) -> list:
    if isinstance(v, (list, tuple)):
        return list(v)
    return [v]


# ---------------------------------------------------------------------------
# cross-task positives
# ---------------------------------------------------------------------------

def sample_cross_task(dataset: Dataset, subject_id: str, task_id: str,
                      rng: np.random.Generator) -> TaskInstance:
    """Uniformly pick an instance of the same subject under a different task."""
    candidates = sorted(
        (inst for inst in dataset.instances
         if inst.subject_id == subject_id and inst.task_id != task_id),
        key=lambda inst: inst.task_id,
    )
    if not candidates:
        raise ValueError(
            f"task-invariance loss requires >=2 tasks per subject; {subject_id!r} has "
            f"no instance outside task {task_id!r}"
        )
    return candidates[int(rng.integers(len(candidates)))]


# ---------------------------------------------------------------------------
# collapse monitoring
# ---------------------------------------------------------------------------

def collapse_statistic(z_batch: np.ndarray) -> float:
    """Mean over channels of the per-channel std of row-normalized embeddings.

    A healthy non-collapsed batch sits near 1/sqrt(d); identical rows give 0.
    """
    z = np.asarray(z_batch, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("need a 2D batch with at least 2 rows")
    norms = np.sqrt((z * z).sum(axis=1, keepdims=True))
    zn = z / (norms + NORM_EPS)
    return float(zn.std(axis=0).mean())


# ---------------------------------------------------------------------------
# the pretraining loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    encoder: GraphImageEncoder
    predictor: Predictor | None
    log: TrainLog
    config: TrainConfig


def view_rng(seed: int, epoch: int, index: int, slot: int) -> np.random.Generator:
    return np.random.default_rng((seed, _TAG_VIEW, epoch, index, slot))


def train_ssl(dataset: Dataset, encoder: GraphImageEncoder, predictor: Predictor | None,
              config: TrainConfig, augment: AugmentConfig | None = None,
              start_epoch: int = 0, log: TrainLog | None = None,
              log_path: str | Path | None = None,
              use_stop_gradient: bool = True) -> TrainResult:
    """Run the pretraining loop from ``start_epoch`` to ``config.epochs``.

    Deterministic given (dataset, seed, thread count); resuming from an epoch
    boundary reproduces the uninterrupted run because all randomness is
    derived per (epoch, instance).  ``use_stop_gradient=False`` and
    ``predictor=None`` exist for the collapse-contrast diagnostics.
    """
    config.validate()
    augment = (augment or AugmentConfig()).validate()
    instances = dataset.instances
    if not instances:
        raise ValueError("dataset has no instances")
    if config.task_invariance:
        for subject in dataset.subjects():
            if len({i.task_id for i in dataset.instances_of(subject)}) < 2:
                raise ValueError(
                    f"task-invariance loss requires >=2 tasks per subject; "
                    f"subject {subject!r} has fewer"
                )

    params = list(encoder.parameters())
    if predictor is not None:
        params += list(predictor.parameters())
    opt = SGD(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    log = log if log is not None else TrainLog()
    if log_path is not None and start_epoch == 0:
        Path(log_path).write_text(TrainLog.HEADER + "\n")

    n = len(instances)
    atlas = dataset.atlas
    seed = config.seed

    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        opt.lr = config.lr_at(epoch)
        order = np.random.default_rng((seed, _TAG_PERM, epoch)).permutation(n)
        encoder.train()
        if predictor is not None:
            predictor.train()

        losses: list[float] = []
        stats: list[float] = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo: lo + config.batch_size]
            v1, v2, vs = [], [], []
            for i in idx:
                inst = instances[int(i)]
                v1.append(augment_view(inst, augment, view_rng(seed, epoch, int(i), 1), atlas))
                v2.append(augment_view(inst, augment, view_rng(seed, epoch, int(i), 2), atlas))
                if config.task_invariance:
                    star = sample_cross_task(
                        dataset, inst.subject_id, inst.task_id,
                        np.random.default_rng((seed, _TAG_CROSS, epoch, int(i))),
                    )
                    vs.append(augment_view(star, augment, view_rng(seed, epoch, int(i), 3), atlas))

            loss, z1_vals = _loss_from_views(
                v1, v2, vs if config.task_invariance else None,
                encoder, predictor, task_invariance=config.task_invariance,
                stop_gradient=use_stop_gradient,
            )
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting {lo} "
                    f"(lr={opt.lr}, batch={len(idx)})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
            if z1_vals.shape[0] >= 2:
                stats.append(collapse_statistic(z1_vals))

        stat = float(np.mean(stats)) if stats else float("nan")
        log.append(
            EpochStats(
                epoch=epoch, mean_loss=float(np.mean(losses)), collapse_stat=stat,
                lr=opt.lr, wall_time=time.perf_counter() - t0,
            ),
            path=log_path,
        )
    return TrainResult(encoder=encoder, predictor=predictor, log=log, config=config)


def _live_symmetric(p1: Tensor, z2: Tensor, p2: Tensor, z1: Tensor,
                    strict: bool = False) -> Tensor:
    """Diagnostic objective with gradients flowing through both sides
    (the no-stop-gradient arm of the collapse contrast)."""
    def cos(p, z):
        pn = (p * p).sum(axis=-1).sqrt()
        zn = (z * z).sum(axis=-1).sqrt()
        return (p * z).sum(axis=-1) / ((pn + NORM_EPS) * (zn + NORM_EPS))

    return (cos(p1, z2).mean() + cos(p2, z1).mean()) * -0.5
