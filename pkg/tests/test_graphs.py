"""Both data views: correlation node features, thresholded partial-correlation
edges, mean-activation volumes, and the instance composition."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brainpair.data import extract_roi_series
from brainpair.graphs import (
    build_instance,
    mean_image,
    partial_corr_matrix,
    pearson_matrix,
    threshold_edges,
)

from conftest import toy_atlas

RNG = np.random.default_rng(99)


# ---------------------------------------------------------------------------
# pearson_matrix
# ---------------------------------------------------------------------------

def test_pearson_identical_and_negated_columns():
    x = RNG.normal(size=50)
    series = np.stack([x, x, -x], axis=1)
    r = pearson_matrix(series)
    assert r[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert r[0, 2] == pytest.approx(-1.0, abs=1e-12)
    np.testing.assert_allclose(np.diag(r), 1.0)


def test_pearson_worked_example():
    x = np.array([1.0, 2.0, 3.0])
    y = np.array([1.0, 2.0, 4.0])
    # independent evaluation of the closed-form coefficient
    dx, dy = x - x.mean(), y - y.mean()
    expected = (dx * dy).sum() / math.sqrt((dx * dx).sum() * (dy * dy).sum())
    r = pearson_matrix(np.stack([x, y], axis=1))
    assert r[0, 1] == pytest.approx(expected, abs=1e-12)
    assert r[0, 1] == pytest.approx(0.98198, abs=5e-6)


def test_pearson_zero_variance_column_zeroed():
    series = np.stack([np.ones(10), RNG.normal(size=10)], axis=1)
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        r = pearson_matrix(series)
    assert r[0, 0] == 0.0 and r[0, 1] == 0.0 and r[1, 0] == 0.0
    assert r[1, 1] == 1.0


def test_pearson_rejects_nonfinite_and_short():
    with pytest.raises(ValueError, match="non-finite"):
        pearson_matrix(np.array([[1.0, np.nan], [2.0, 3.0]]))
    with pytest.raises(ValueError, match="2 frames"):
        pearson_matrix(np.ones((1, 3)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000),
       scale=st.floats(0.01, 100.0),
       shift=st.floats(-50.0, 50.0))
def test_pearson_affine_invariance(seed, scale, shift):
    series = np.random.default_rng(seed).normal(size=(20, 4))
    base = pearson_matrix(series)
    transformed = pearson_matrix(series * scale + shift)
    np.testing.assert_allclose(transformed, base, atol=1e-9)


# ---------------------------------------------------------------------------
# partial_corr_matrix
# ---------------------------------------------------------------------------

def _partial_corr_residual_oracle(series):
    """Regress each pair on all remaining columns; correlate the residuals."""
    t, n = series.shape
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            others = [k for k in range(n) if k not in (i, j)]
            design = np.column_stack([series[:, others], np.ones(t)])
            ri = series[:, i] - design @ np.linalg.lstsq(design, series[:, i], rcond=None)[0]
            rj = series[:, j] - design @ np.linalg.lstsq(design, series[:, j], rcond=None)[0]
            out[i, j] = out[j, i] = (
                (ri * rj).sum() / np.sqrt((ri * ri).sum() * (rj * rj).sum())
            )
    return out


def test_partial_equals_pearson_for_two_columns():
    series = RNG.normal(size=(500, 2))
    series[:, 1] += 0.5 * series[:, 0]
    p = partial_corr_matrix(series, ridge=0.0)
    r = pearson_matrix(series)
    assert p[0, 1] == pytest.approx(r[0, 1], abs=1e-8)


def test_partial_matches_residual_oracle():
    rng = np.random.default_rng(7)
    for n in (3, 4, 5):
        latent = rng.normal(size=(2000, n))
        mix = rng.normal(size=(n, n)) * 0.4 + np.eye(n)
        series = latent @ mix
        p = partial_corr_matrix(series, ridge=0.0)
        oracle = _partial_corr_residual_oracle(series)
        np.testing.assert_allclose(p, oracle, atol=1e-8)


def test_partial_chain_conditioning():
    rng = np.random.default_rng(1)
    x = rng.normal(size=2000)
    z = x + 0.5 * rng.normal(size=2000)
    y = z + 0.5 * rng.normal(size=2000)  # y depends on x only through z
    p = partial_corr_matrix(np.stack([x, z, y], axis=1), ridge=0.0)
    assert abs(p[0, 2]) < 0.1
    assert abs(p[0, 1]) > 0.5


def test_partial_independent_columns_near_zero():
    for seed in range(5):
        series = np.random.default_rng(seed).normal(size=(2000, 4))
        p = partial_corr_matrix(series, ridge=0.0)
        off = p[~np.eye(4, dtype=bool)]
        assert np.abs(off).max() < 0.15


def test_partial_singular_needs_ridge():
    series = RNG.normal(size=(3, 5))
    with pytest.raises(ValueError, match="ridge"):
        partial_corr_matrix(series, ridge=0.0)
    p = partial_corr_matrix(series, ridge=1e-3)  # regularized succeeds
    assert np.isfinite(p).all()
    with pytest.raises(ValueError, match="ridge"):
        # duplicated columns: singular even with T > n
        dup = np.stack([series[:, 0]] * 2, axis=1)
        partial_corr_matrix(np.repeat(dup, 3, axis=0), ridge=0.0)


def test_partial_clamped_and_symmetric():
    series = RNG.normal(size=(30, 6))
    p = partial_corr_matrix(series, ridge=1e-3)
    assert np.abs(p).max() <= 1.0
    np.testing.assert_allclose(p, p.T)


# ---------------------------------------------------------------------------
# threshold_edges
# ---------------------------------------------------------------------------

def _edges_bruteforce(p, fraction):
    n = p.shape[0]
    cands = [(i, j, p[i, j]) for i in range(n) for j in range(i + 1, n) if p[i, j] != 0]
    cands.sort(key=lambda e: (-abs(e[2]), e[0], e[1]))
    keep = cands[: min(math.ceil(fraction * n * (n - 1) / 2), len(cands))]
    return sorted((i, j, v) for i, j, v in keep)


def test_threshold_three_nodes():
    p = np.eye(3)
    p[0, 1] = p[1, 0] = 0.9
    p[0, 2] = p[2, 0] = -0.5
    p[1, 2] = p[2, 1] = 0.1
    idx, w = threshold_edges(p, 0.05)
    assert idx.tolist() == [[0, 1]]
    assert w.tolist() == [0.9]


def test_threshold_paper_atlas_counts():
    for n, expected in ((268, 1789), (84, 175)):
        rng = np.random.default_rng(n)
        p = rng.normal(size=(n, n))
        p = (p + p.T) / 2
        np.fill_diagonal(p, 1.0)
        idx, _ = threshold_edges(p, 0.05)
        assert idx.shape[0] == expected
        assert expected == math.ceil(0.05 * n * (n - 1) / 2)


def test_threshold_matches_bruteforce_all_n():
    for n in range(2, 65):
        rng = np.random.default_rng(n)
        p = rng.normal(size=(n, n))
        p = (p + p.T) / 2
        np.fill_diagonal(p, 1.0)
        idx, w = threshold_edges(p, 0.05)
        got = sorted((int(i), int(j), float(v)) for (i, j), v in zip(idx, w))
        assert got == _edges_bruteforce(p, 0.05)


def test_threshold_tie_break_lexicographic():
    p = np.zeros((4, 4))
    for i, j in ((0, 3), (1, 2), (0, 1)):
        p[i, j] = p[j, i] = 0.5  # all tied; ceil(0.05*6)=1 edge kept
    np.fill_diagonal(p, 1.0)
    idx, w = threshold_edges(p, 0.05)
    assert idx.tolist() == [[0, 1]]


def test_threshold_permutation_of_evaluation_order_is_irrelevant():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(12, 12))
    p = (p + p.T) / 2
    base = threshold_edges(p, 0.2)
    again = threshold_edges(np.array(p, order="F"), 0.2)
    np.testing.assert_array_equal(base[0], again[0])
    np.testing.assert_array_equal(base[1], again[1])


def test_threshold_zero_matrix_and_errors():
    idx, w = threshold_edges(np.zeros((5, 5)), 0.05)
    assert idx.shape == (0, 2) and w.shape == (0,)
    bad = np.zeros((3, 3))
    bad[0, 1] = 1e-6
    with pytest.raises(ValueError, match="asymmetric"):
        threshold_edges(bad)
    with pytest.raises(ValueError, match="fraction"):
        threshold_edges(np.zeros((3, 3)), 0.0)


# ---------------------------------------------------------------------------
# mean_image
# ---------------------------------------------------------------------------

def test_mean_image_cases():
    frame = RNG.normal(size=(3, 4, 5))
    np.testing.assert_array_equal(mean_image(frame[None]), frame)
    np.testing.assert_allclose(mean_image(np.stack([frame, -frame])), 0.0, atol=1e-16)
    two = np.zeros((2, 1, 1, 1))
    two[1] = 2.0
    assert mean_image(two)[0, 0, 0] == 1.0


# ---------------------------------------------------------------------------
# build_instance composition
# ---------------------------------------------------------------------------

def test_build_instance_is_exact_composition():
    atlas = toy_atlas(shape=(4, 4, 4), n_rois=3, seed=2)
    series = RNG.normal(size=(40, 4, 4, 4))
    inst = build_instance("s0", "t0", series, atlas, ridge=1e-3, edge_fraction=0.2)

    roi = extract_roi_series(series, atlas)
    nf = pearson_matrix(roi)
    idx, w = threshold_edges(partial_corr_matrix(roi, ridge=1e-3), 0.2)
    img = mean_image(series)

    assert inst.graph.node_features.tobytes() == nf.tobytes()
    assert inst.graph.edge_index.tobytes() == idx.tobytes()
    assert inst.graph.edge_weight.tobytes() == w.tobytes()
    assert inst.image.tobytes() == img.tobytes()
    np.testing.assert_allclose(np.diag(inst.graph.node_features), 1.0)


def test_build_instance_edge_count_84():
    # one synthetic 84-region instance hits the ceil(0.05 * 84*83/2) = 175 law
    rng = np.random.default_rng(0)
    labels = np.zeros((10, 10, 10), dtype=np.int32)
    order = rng.permutation(1000)
    for r in range(84):
        labels.flat[order[r * 10:(r + 1) * 10]] = r + 1
    from brainpair.data import AtlasVolume

    atlas = AtlasVolume(labels=labels, n_rois=84).validate()
    series = rng.normal(size=(120, 10, 10, 10))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        inst = build_instance("s", "t", series, atlas, ridge=1e-2)
    assert inst.graph.edge_index.shape[0] == 175
