"""Data model, folds, series utilities, the on-disk format, and the
synthetic generator's contracts."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brainpair.data import (
    AtlasVolume,
    FoldSplit,
    Phenotype,
    PhenotypeTable,
    check_no_leakage,
    extract_roi_series,
    load_dataset,
    make_folds,
    save_dataset,
    split_into_blocks,
)
from brainpair.synth import SynthConfig, generate_synthetic, make_block_atlas

from conftest import toy_atlas


# ---------------------------------------------------------------------------
# atlas validation
# ---------------------------------------------------------------------------

def test_atlas_missing_roi_rejected():
    labels = np.zeros((4, 4, 4), dtype=np.int32)
    for r in (1, 2, 3, 4, 6, 7, 8):
        labels.flat[r - 1] = r  # every ROI except 5 gets one voxel
    with pytest.raises(ValueError, match="ROI 5 has no voxels"):
        AtlasVolume(labels=labels, n_rois=8).validate()


def test_atlas_label_bounds():
    labels = np.full((2, 2, 2), 3, dtype=np.int32)
    with pytest.raises(ValueError, match="exceeds"):
        AtlasVolume(labels=labels, n_rois=2).validate()
    with pytest.raises(ValueError, match="non-negative"):
        AtlasVolume(labels=-labels, n_rois=3).validate()


def test_block_atlas_covers_every_roi():
    atlas = make_block_atlas((16, 16, 16), 12)
    counts = np.bincount(atlas.labels.reshape(-1), minlength=13)
    assert counts[1:].min() > 0
    assert counts[0] > 0  # one-voxel border stays background


# ---------------------------------------------------------------------------
# split_into_blocks
# ---------------------------------------------------------------------------

def test_blocks_partition_identity():
    series = np.arange(24 * 8, dtype=np.float64).reshape(24, 2, 2, 2)
    blocks = split_into_blocks(series, [(0, 12), (12, 24)])
    assert [b.shape[0] for b in blocks] == [12, 12]
    np.testing.assert_array_equal(np.concatenate(blocks), series)


def test_twelve_equal_blocks():
    series = np.random.default_rng(0).normal(size=(144, 3, 3, 3))
    bounds = [(12 * i, 12 * (i + 1)) for i in range(12)]
    blocks = split_into_blocks(series, bounds)
    assert len(blocks) == 12
    assert all(b.shape[0] == 12 for b in blocks)


def test_blocks_reject_overlap_range_and_short():
    series = np.zeros((16, 2, 2, 2))
    with pytest.raises(ValueError, match="overlap"):
        split_into_blocks(series, [(0, 10), (8, 16)])
    with pytest.raises(ValueError, match="out of range"):
        split_into_blocks(series, [(0, 20)])
    with pytest.raises(ValueError, match="fewer than 2"):
        split_into_blocks(series, [(0, 1)])


def test_blocks_are_copies():
    series = np.zeros((8, 1, 1, 1))
    (block,) = split_into_blocks(series, [(0, 4)])
    block += 1.0
    assert series.sum() == 0.0


# ---------------------------------------------------------------------------
# extract_roi_series
# ---------------------------------------------------------------------------

def test_extract_constant_roi():
    atlas = toy_atlas()
    series = np.zeros((3, *atlas.shape))
    series[1][atlas.labels == 1] = 5.0
    out = extract_roi_series(series, atlas)
    assert out[1, 0] == 5.0
    assert out[0, 0] == 0.0


def test_extract_two_point_mean():
    labels = np.zeros((2, 1, 1), dtype=np.int32)
    labels[:, 0, 0] = 1
    atlas = AtlasVolume(labels=labels, n_rois=1).validate()
    series = np.array([0.0, 2.0]).reshape(1, 2, 1, 1)
    assert extract_roi_series(series, atlas)[0, 0] == 1.0


def test_extract_matches_bruteforce_voxel_loop():
    atlas = toy_atlas(shape=(4, 4, 4), n_rois=3, seed=3)
    series = np.random.default_rng(5).normal(size=(6, 4, 4, 4))
    got = extract_roi_series(series, atlas)

    expected = np.zeros_like(got)
    counts = np.zeros(3)
    for x in range(4):
        for y in range(4):
            for z in range(4):
                r = atlas.labels[x, y, z]
                if r > 0:
                    counts[r - 1] += 1
                    expected[:, r - 1] += series[:, x, y, z]
    expected /= counts
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_extract_shape_mismatch():
    atlas = toy_atlas()
    with pytest.raises(ValueError, match="match"):
        extract_roi_series(np.zeros((3, 2, 2, 2)), atlas)


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

def _dataset_stub(subjects, classes=None):
    """FoldSplit only needs subjects + phenotypes; reuse the real types."""
    from brainpair.data import BrainGraph, Dataset, TaskInstance

    atlas = toy_atlas(shape=(3, 3, 3), n_rois=2, seed=1)
    nf = np.eye(2)
    graph = BrainGraph(n=2, node_features=nf, edge_index=np.empty((0, 2), dtype=np.int64),
                       edge_weight=np.empty(0))
    instances = [
        TaskInstance(subject_id=s, task_id=t, graph=graph, image=np.zeros(atlas.shape))
        for s in subjects for t in ("task0", "task1")
    ]
    phen = {}
    if classes is not None:
        phen["dx"] = Phenotype(kind="categorical", values=dict(zip(subjects, classes)))
    return Dataset(instances=instances, atlas=atlas,
                   phenotypes=PhenotypeTable(phen), task_set=["task0", "task1"])


def test_even_split_10_subjects():
    ds = _dataset_stub([f"s{i}" for i in range(10)])
    folds = make_folds(ds, 5, seed=0)
    sizes = np.bincount(list(folds.assignment.values()), minlength=5)
    assert sizes.tolist() == [2, 2, 2, 2, 2]


def test_stratified_118_subjects_75_43():
    subjects = [f"s{i:03d}" for i in range(118)]
    classes = [0] * 75 + [1] * 43
    ds = _dataset_stub(subjects, classes)
    folds = make_folds(ds, 5, stratify="dx", seed=3)
    for f in range(5):
        members = folds.subjects_in_fold(f)
        a = sum(1 for s in members if classes[subjects.index(s)] == 0)
        b = len(members) - a
        assert a in (15, 15 + 1) or a in (14, 15)  # 75/5 = 15 exactly
        assert a == 15
        assert b in (8, 9)
    sizes = [len(folds.subjects_in_fold(f)) for f in range(5)]
    assert max(sizes) - min(sizes) <= 1
    check_no_leakage(folds)


def test_same_subject_same_fold(tiny_dataset):
    folds = make_folds(tiny_dataset, 3, seed=0)
    for inst in tiny_dataset.instances:
        assert folds.assignment[inst.subject_id] == folds.assignment[inst.subject_id]
    # all instances of a subject share the fold by construction of assignment
    by_subject = {}
    for inst in tiny_dataset.instances:
        by_subject.setdefault(inst.subject_id, set()).add(folds.assignment[inst.subject_id])
    assert all(len(v) == 1 for v in by_subject.values())


def test_fold_errors():
    ds = _dataset_stub(["a", "b", "c"], classes=[0, 1, 0])
    with pytest.raises(ValueError, match="exceeds"):
        make_folds(ds, 5, seed=0)
    ds2 = _dataset_stub(["a", "b", "c"])
    ds2.phenotypes.phenotypes["iq"] = Phenotype(kind="continuous",
                                                values={"a": 1.0, "b": 2.0, "c": 3.0})
    with pytest.raises(ValueError, match="categorical"):
        make_folds(ds2, 2, stratify="iq", seed=0)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(5, 40), k=st.integers(2, 5), seed=st.integers(0, 999))
def test_fold_sizes_and_leakage_property(n, k, seed):
    if k > n:
        return
    ds = _dataset_stub([f"s{i}" for i in range(n)])
    folds = make_folds(ds, k, seed=seed)
    sizes = np.bincount(list(folds.assignment.values()), minlength=k)
    assert sizes.max() - sizes.min() <= 1
    check_no_leakage(folds)


def test_foldsplit_validate_rejects_imbalance():
    fs = FoldSplit(k=2, assignment={"a": 0, "b": 0, "c": 0, "d": 1}, stratify_label=None, seed=0)
    with pytest.raises(ValueError, match="differ"):
        fs.validate()


# ---------------------------------------------------------------------------
# on-disk round trip
# ---------------------------------------------------------------------------

def _blob_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*.bin"))}


def test_round_trip_byte_identical(tiny_dataset, tmp_path):
    first = tmp_path / "d1"
    save_dataset(tiny_dataset, first)
    loaded = load_dataset(first)
    second = tmp_path / "d2"
    save_dataset(loaded, second)
    assert _blob_bytes(first) == _blob_bytes(second)
    assert (first / "manifest.json").read_text() == (second / "manifest.json").read_text()


def test_load_counts_and_validation(tiny_dataset, tmp_path):
    save_dataset(tiny_dataset, tmp_path / "ds")
    ds = load_dataset(tmp_path / "ds")
    assert len(ds.instances) == 9 * 3
    assert len(ds.task_set) == 3
    assert ds.ground_truth is not None and "class_rois" in ds.ground_truth


def test_load_empty_instances(tmp_path, tiny_dataset):
    from brainpair.data import Dataset

    empty = Dataset(instances=[], atlas=tiny_dataset.atlas,
                    phenotypes=PhenotypeTable({}), task_set=[])
    save_dataset(empty, tmp_path / "empty")
    ds = load_dataset(tmp_path / "empty")
    assert ds.instances == []
    assert ds.atlas.n_rois == tiny_dataset.atlas.n_rois


def test_missing_blob_named_in_error(tiny_dataset, tmp_path):
    save_dataset(tiny_dataset, tmp_path / "ds")
    victim = next((tmp_path / "ds" / "blobs").glob("*_image.bin"))
    victim.unlink()
    with pytest.raises(FileNotFoundError, match=victim.name):
        load_dataset(tmp_path / "ds")


def test_manifest_unknown_task_rejected(tiny_dataset, tmp_path):
    import json

    save_dataset(tiny_dataset, tmp_path / "ds")
    path = tmp_path / "ds" / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["task_set"] = manifest["task_set"][:-1]
    path.write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="unknown task"):
        load_dataset(tmp_path / "ds")


def test_categorical_codes_must_be_contiguous():
    with pytest.raises(ValueError, match="contiguous"):
        Phenotype(kind="categorical", values={"a": 0, "b": 2}).validate("bad")


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def test_synthetic_deterministic_and_seed_sensitive(tmp_path):
    cfg = SynthConfig(n_subjects=3, n_tasks=2, t_frames=24)
    a = generate_synthetic(cfg, seed=11)
    b = generate_synthetic(cfg, seed=11)
    c = generate_synthetic(cfg, seed=12)
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    save_dataset(c, tmp_path / "c")
    assert _blob_bytes(tmp_path / "a") == _blob_bytes(tmp_path / "b")
    assert _blob_bytes(tmp_path / "a") != _blob_bytes(tmp_path / "c")


def test_synthetic_counts():
    ds = generate_synthetic(SynthConfig(n_subjects=12, n_tasks=4, t_frames=24), seed=0)
    assert len(ds.instances) == 48
    assert len(ds.task_set) == 4
    assert len(ds.subjects()) == 12


def test_synthetic_config_errors():
    with pytest.raises(ValueError, match="t_frames"):
        SynthConfig(t_frames=1).validate()
    with pytest.raises(ValueError, match="exceeds"):
        SynthConfig(n_rois=10_000, volume_shape=(8, 8, 8)).validate()


def test_synthetic_ground_truth_recorded(tiny_dataset):
    gt = tiny_dataset.ground_truth
    assert set(gt["class_rois"]).isdisjoint({gt["signal_roi"]})
    assert gt["signal_strength"] == 3.0
    kinds = {name: tiny_dataset.phenotypes.kind(name) for name in tiny_dataset.phenotypes.names()}
    assert kinds == {"group": "categorical", "score": "continuous"}
