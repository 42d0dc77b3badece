"""Domain types, the on-disk dataset format, folds, and series utilities.

A dataset directory contains a ``manifest.json`` plus raw binary blobs:

* float blobs: little-endian float32, C (row-major) order, shape recorded
  in the manifest;
* the atlas blob: little-endian int32, same layout.

Exact manifest field names are part of the public contract and frozen by
the round-trip tests; see the README for the annotated layout.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "brainpair.dataset"
MANIFEST_VERSION = 1

FLOAT_DTYPE = np.dtype("<f4")
INT_DTYPE = np.dtype("<i4")


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class AtlasVolume:
    """Voxel-wise integer parcellation: 0 = background, 1..n_rois = regions."""

    labels: np.ndarray  # (X, Y, Z) int
    n_rois: int

    def validate(self) -> "AtlasVolume":
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"atlas labels must be 3D, got shape {labels.shape}")
        if labels.min() < 0:
            raise ValueError("atlas labels must be non-negative")
        if labels.max() > self.n_rois:
            raise ValueError(
                f"atlas label {int(labels.max())} exceeds declared region count {self.n_rois}"
            )
        present = np.bincount(labels.reshape(-1), minlength=self.n_rois + 1)
        for r in range(1, self.n_rois + 1):
            if present[r] == 0:
                raise ValueError(f"ROI {r} has no voxels")
        return self

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass
class BrainGraph:
    """Functional brain graph: Pearson rows as node features, sparse signed edges.

    ``edge_index`` holds (i, j) pairs with i < j; ``edge_weight`` the signed
    partial-correlation coefficients retained by thresholding.
    """

    n: int
    node_features: np.ndarray  # (n, n) float
    edge_index: np.ndarray     # (m, 2) int
    edge_weight: np.ndarray    # (m,) float

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        return [
            (int(i), int(j), float(w))
            for (i, j), w in zip(self.edge_index, self.edge_weight)
        ]

    def validate(self) -> "BrainGraph":
        nf = np.asarray(self.node_features)
        if nf.shape != (self.n, self.n):
            raise ValueError(f"node_features must be ({self.n}, {self.n}), got {nf.shape}")
        if not np.isfinite(nf).all():
            raise ValueError("node features contain non-finite values")
        if np.abs(nf).max(initial=0.0) > 1.0 + 1e-9:
            raise ValueError("node feature magnitude exceeds 1 + 1e-9")
        ei = np.asarray(self.edge_index).reshape(-1, 2)
        ew = np.asarray(self.edge_weight).reshape(-1)
        if ei.shape[0] != ew.shape[0]:
            raise ValueError("edge_index / edge_weight length mismatch")
        if ei.size:
            if ei.min() < 0 or ei.max() >= self.n:
                raise ValueError("edge endpoint out of range")
            if (ei[:, 0] >= ei[:, 1]).any():
                raise ValueError("edges must satisfy i < j")
            pairs = {(int(i), int(j)) for i, j in ei}
            if len(pairs) != ei.shape[0]:
                raise ValueError("duplicate edges")
            if not np.isfinite(ew).all() or (ew == 0).any():
                raise ValueError("edge weights must be finite and nonzero")
        return self

    def edges_as_blob(self) -> np.ndarray:
        out = np.empty((self.edge_index.shape[0], 3), dtype=np.float64)
        if out.size:
            out[:, 0] = self.edge_index[:, 0]
            out[:, 1] = self.edge_index[:, 1]
            out[:, 2] = self.edge_weight
        return out

    @staticmethod
    def from_blob(n: int, node_features: np.ndarray, edge_blob: np.ndarray) -> "BrainGraph":
        edge_blob = edge_blob.reshape(-1, 3)
        return BrainGraph(
            n=n,
            node_features=node_features,
            edge_index=edge_blob[:, :2].astype(np.int64),
            edge_weight=edge_blob[:, 2].copy(),
        )


@dataclass
class TaskInstance:
    """One (subject, task) sample: brain graph + mean-activation volume."""

    subject_id: str
    task_id: str
    graph: BrainGraph
    image: np.ndarray  # (X, Y, Z) float mean-activation volume
    atlas_ref: str = "atlas"

    def validate(self, atlas: AtlasVolume) -> "TaskInstance":
        self.graph.validate()
        if self.graph.n != atlas.n_rois:
            raise ValueError(
                f"instance {self.subject_id}/{self.task_id}: graph has {self.graph.n} "
                f"nodes, atlas has {atlas.n_rois} regions"
            )
        img = np.asarray(self.image)
        if img.shape != atlas.shape:
            raise ValueError(
                f"instance {self.subject_id}/{self.task_id}: image shape {img.shape} "
                f"does not match atlas shape {atlas.shape}"
            )
        if not np.isfinite(img).all():
            raise ValueError("image contains non-finite values")
        return self


@dataclass
class Phenotype:
    kind: str  # "categorical" | "continuous"
    values: dict[str, float]

    def validate(self, name: str) -> "Phenotype":
        if self.kind not in ("categorical", "continuous"):
            raise ValueError(f"phenotype {name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            codes = sorted({int(v) for v in self.values.values()})
            if codes and codes != list(range(len(codes))):
                raise ValueError(
                    f"phenotype {name!r}: categorical codes must be 0-based contiguous, got {codes}"
                )
            for s, v in self.values.items():
                if float(v) != int(v):
                    raise ValueError(f"phenotype {name!r}: non-integer code {v} for {s}")
        return self


@dataclass
class PhenotypeTable:
    phenotypes: dict[str, Phenotype] = field(default_factory=dict)

    def names(self) -> list[str]:
        return sorted(self.phenotypes)

    def kind(self, name: str) -> str:
        return self.phenotypes[name].kind

    def value(self, name: str, subject_id: str) -> float:
        pheno = self.phenotypes.get(name)
        if pheno is None:
            raise KeyError(f"unknown phenotype {name!r}")
        if subject_id not in pheno.values:
            raise KeyError(f"phenotype {name!r} missing for subject {subject_id!r}")
        return float(pheno.values[subject_id])

    def validate(self, subjects: list[str] | None = None) -> "PhenotypeTable":
        for name, p in self.phenotypes.items():
            p.validate(name)
            if subjects is not None:
                missing = [s for s in subjects if s not in p.values]
                if missing:
                    raise ValueError(
                        f"phenotype {name!r} missing entries for subjects {missing[:5]}"
                    )
        return self


@dataclass
class Dataset:
    instances: list[TaskInstance]
    atlas: AtlasVolume
    phenotypes: PhenotypeTable
    task_set: list[str]
    ground_truth: dict | None = None

    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for inst in self.instances:
            seen.setdefault(inst.subject_id, None)
        return list(seen)

    def instances_of(self, subject_id: str) -> list[TaskInstance]:
        return [i for i in self.instances if i.subject_id == subject_id]

    def validate(self) -> "Dataset":
        self.atlas.validate()
        known = set(self.task_set)
        for inst in self.instances:
            inst.validate(self.atlas)
            if inst.task_id not in known:
                raise ValueError(
                    f"instance {inst.subject_id}/{inst.task_id}: unknown task id {inst.task_id!r}"
                )
        self.phenotypes.validate(self.subjects())
        return self


@dataclass
class FoldSplit:
    """Subject-level cross-validation assignment (all of a subject's instances
    share one fold, which is what prevents identity leakage)."""

    k: int
    assignment: dict[str, int]
    stratify_label: str | None
    seed: int

    def subjects_in_fold(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def train_test_subjects(self, fold: int) -> tuple[list[str], list[str]]:
        test = self.subjects_in_fold(fold)
        train = sorted(s for s, f in self.assignment.items() if f != fold)
        return train, test

    def validate(self) -> "FoldSplit":
        folds = np.array(sorted(self.assignment.values()))
        if folds.size and (folds.min() < 0 or folds.max() >= self.k):
            raise ValueError("fold index out of range")
        sizes = np.bincount(list(self.assignment.values()), minlength=self.k)
        if sizes.max() - sizes.min() > 1:
            raise ValueError(f"fold sizes differ by more than 1: {sizes.tolist()}")
        return self


# ---------------------------------------------------------------------------
# series utilities
# ---------------------------------------------------------------------------

def split_into_blocks(series: np.ndarray, boundaries: list[tuple[int, int]]) -> list[np.ndarray]:
    """Cut a (T, X, Y, Z) series into block sub-series.

    ``boundaries`` are ordered, non-overlapping (start, end) frame pairs with
    exclusive ends; every block must span at least 2 frames.
    """
    series = np.asarray(series)
    t_total = series.shape[0]
    prev_end = 0
    out = []
    for start, end in boundaries:
        if not (0 <= start < end <= t_total):
            raise ValueError(f"block ({start}, {end}) out of range for T={t_total}")
        if start < prev_end:
            raise ValueError(f"block ({start}, {end}) overlaps previous block ending at {prev_end}")
        if end - start < 2:
            raise ValueError(f"block ({start}, {end}) has fewer than 2 frames")
        out.append(series[start:end].copy())
        prev_end = end
    return out


def extract_roi_series(series: np.ndarray, atlas: AtlasVolume) -> np.ndarray:
    """Average the voxel series within each region: output column r at frame t
    is the unweighted spatial mean over voxels labeled r."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 4:
        raise ValueError(f"voxel series must be 4D (T, X, Y, Z), got {series.shape}")
    if series.shape[1:] != atlas.shape:
        raise ValueError(
            f"voxel series spatial shape {series.shape[1:]} does not match atlas {atlas.shape}"
        )
    if not np.isfinite(series).all():
        raise ValueError("voxel series contains non-finite values")
    t_total = series.shape[0]
    n = atlas.n_rois
    labels_flat = atlas.labels.reshape(-1)
    counts = np.bincount(labels_flat, minlength=n + 1)[1:]
    out = np.empty((t_total, n), dtype=np.float64)
    flat = series.reshape(t_total, -1)
    for t in range(t_total):
        sums = np.bincount(labels_flat, weights=flat[t], minlength=n + 1)[1:]
        out[t] = sums / counts
    return out


# ---------------------------------------------------------------------------
# cross-validation folds
# ---------------------------------------------------------------------------

def make_folds(dataset: Dataset, k: int, stratify: str | None = None, seed: int = 0) -> FoldSplit:
    """Assign subjects to k folds, optionally stratified by a categorical phenotype.

    Round-robin within class after a seeded shuffle; remainder subjects go to
    the currently smallest folds (ties by fold index), which keeps overall
    fold sizes within one of each other.
    """
    subjects = sorted(dataset.subjects())
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(subjects):
        raise ValueError(f"k={k} exceeds subject count {len(subjects)}")
    rng = np.random.default_rng(seed)

    if stratify is None:
        groups = [subjects]
    else:
        if dataset.phenotypes.kind(stratify) != "categorical":
            raise ValueError(f"stratify phenotype {stratify!r} must be categorical")
        by_class: dict[int, list[str]] = {}
        for s in subjects:
            by_class.setdefault(int(dataset.phenotypes.value(stratify, s)), []).append(s)
        groups = [by_class[c] for c in sorted(by_class)]

    assignment: dict[str, int] = {}
    sizes = np.zeros(k, dtype=int)
    for group in groups:
        order = [group[i] for i in rng.permutation(len(group))]
        q, r = divmod(len(order), k)
        pos = 0
        for _ in range(q):
            for f in range(k):
                assignment[order[pos]] = f
                sizes[f] += 1
                pos += 1
        # remainder: smallest folds first, ties by index
        remainder_folds = sorted(range(k), key=lambda f: (sizes[f], f))[:r]
        for f in remainder_folds:
            assignment[order[pos]] = f
            sizes[f] += 1
            pos += 1

    return FoldSplit(k=k, assignment=assignment, stratify_label=stratify, seed=seed).validate()


def check_no_leakage(folds: FoldSplit) -> None:
    for f in range(folds.k):
        train, test = folds.train_test_subjects(f)
        inter = set(train) & set(test)
        if inter:
            raise ValueError(f"subject leakage between folds: {sorted(inter)[:5]}")


# ---------------------------------------------------------------------------
# dataset directory I/O
# ---------------------------------------------------------------------------

def _write_blob(path: Path, arr: np.ndarray, dtype: np.dtype) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.asarray(arr).astype(dtype).tobytes())


def _read_blob(path: Path, shape: list[int], dtype: np.dtype) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"dataset blob missing: {path}")
    raw = np.frombuffer(path.read_bytes(), dtype=dtype)
    expected = int(np.prod(shape)) if shape else 0
    if raw.size != expected:
        raise ValueError(f"blob {path} has {raw.size} elements, manifest says {expected}")
    return raw.reshape(shape).copy()


def _blob_name(inst: TaskInstance, kind: str) -> str:
    return f"blobs/{inst.subject_id}_{inst.task_id}_{kind}.bin"


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write a validated dataset directory; returns the manifest path."""
    dataset.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    _write_blob(out_dir / "atlas.bin", dataset.atlas.labels, INT_DTYPE)
    records = []
    for inst in dataset.instances:
        nf_name = _blob_name(inst, "nodes")
        edge_name = _blob_name(inst, "edges")
        img_name = _blob_name(inst, "image")
        edge_blob = inst.graph.edges_as_blob()
        _write_blob(out_dir / nf_name, inst.graph.node_features, FLOAT_DTYPE)
        _write_blob(out_dir / edge_name, edge_blob, FLOAT_DTYPE)
        _write_blob(out_dir / img_name, inst.image, FLOAT_DTYPE)
        records.append(
            {
                "subject_id": inst.subject_id,
                "task_id": inst.task_id,
                "node_features": {"file": nf_name, "shape": list(inst.graph.node_features.shape)},
                "edges": {"file": edge_name, "shape": list(edge_blob.shape)},
                "image": {"file": img_name, "shape": list(inst.image.shape)},
            }
        )

    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "atlas": {
            "file": "atlas.bin",
            "shape": list(dataset.atlas.shape),
            "n_rois": dataset.atlas.n_rois,
        },
        "task_set": list(dataset.task_set),
        "instances": records,
        "phenotypes": {
            name: {"kind": p.kind, "values": p.values}
            for name, p in dataset.phenotypes.phenotypes.items()
        },
    }
    if dataset.ground_truth is not None:
        manifest["ground_truth"] = dataset.ground_truth

    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_dataset(path: str | Path) -> Dataset:
    """Load and fully validate a dataset directory (or its manifest path)."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest_path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"not a dataset manifest: {manifest_path}")

    atlas_rec = manifest["atlas"]
    atlas = AtlasVolume(
        labels=_read_blob(root / atlas_rec["file"], atlas_rec["shape"], INT_DTYPE),
        n_rois=int(atlas_rec["n_rois"]),
    )

    instances = []
    for rec in manifest["instances"]:
        nf = _read_blob(root / rec["node_features"]["file"], rec["node_features"]["shape"], FLOAT_DTYPE)
        edge_blob = _read_blob(root / rec["edges"]["file"], rec["edges"]["shape"], FLOAT_DTYPE)
        img = _read_blob(root / rec["image"]["file"], rec["image"]["shape"], FLOAT_DTYPE)
        graph = BrainGraph.from_blob(atlas.n_rois, nf, edge_blob.astype(np.float64))
        instances.append(
            TaskInstance(
                subject_id=rec["subject_id"],
                task_id=rec["task_id"],
                graph=graph,
                image=img,
            )
        )

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
    dataset = Dataset(
        instances=instances,
        atlas=atlas,
        phenotypes=phenos,
        task_set=list(manifest["task_set"]),
        ground_truth=manifest.get("ground_truth"),
    )
    return dataset.validate()


def warn_zero_variance(context: str, indices: np.ndarray) -> None:
    if indices.size:
        warnings.warn(
            f"{context}: zero-variance regions {indices.tolist()[:8]} produce zero rows",
            RuntimeWarning,
            stacklevel=3,
        )
