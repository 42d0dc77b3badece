"""The pretraining objective and loop: loss identities, the stop-gradient
contract (bitwise), cross-task sampling, the step schedule, resumability,
and collapse monitoring."""

import numpy as np
import pytest

from brainpair.augment import AugmentConfig, identity_view
from brainpair.autodiff import Tensor
from brainpair.model import build_predictor
from brainpair.nn import SGD, param_hash
from brainpair.selfsup import (
    TrainConfig,
    TrainLog,
    TrainingDiverged,
    collapse_statistic,
    sample_cross_task,
    symmetric_cosine_loss,
    total_loss,
    train_ssl,
)

from conftest import make_tiny_encoder

RNG = np.random.default_rng(11)


# ---------------------------------------------------------------------------
# symmetric cosine loss
# ---------------------------------------------------------------------------

def test_loss_perfect_alignment_and_orthogonality():
    u = np.array([1.0, 0.0, 0.0])
    v = np.array([0.0, 1.0, 0.0])
    assert float(symmetric_cosine_loss(u, u, v, v).data) == pytest.approx(-1.0, abs=1e-9)
    assert float(symmetric_cosine_loss(u, v, v, u).data) == pytest.approx(0.0, abs=1e-9)


def test_loss_worked_example():
    p1, z2 = np.array([1.0, 0.0]), np.array([1.0, 1.0])
    p2, z1 = np.array([0.0, 1.0]), np.array([1.0, 0.0])
    expected = -0.5 * (1.0 / np.sqrt(2.0))
    assert float(symmetric_cosine_loss(p1, z2, p2, z1).data) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(-0.35355, abs=5e-6)


def test_loss_scale_invariance():
    p1, z2, p2, z1 = (RNG.normal(size=8) for _ in range(4))
    base = float(symmetric_cosine_loss(p1, z2, p2, z1).data)
    for s in (1e-3, 7.0, 1e4):
        scaled = float(symmetric_cosine_loss(p1 * s, z2, p2, z1 * s).data)
        assert scaled == pytest.approx(base, abs=1e-9)


def test_loss_bounds_batch():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        args = [rng.normal(size=(4, 6)) for _ in range(4)]
        v = float(symmetric_cosine_loss(*args).data)
        assert -1.0 <= v <= 1.0


def test_loss_strict_mode_zero_vector():
    z = np.zeros(4)
    p = np.ones(4)
    # lenient mode: finite via the norm floor
    assert np.isfinite(float(symmetric_cosine_loss(p, z, p, p).data))
    with pytest.raises(ValueError, match="zero vector"):
        symmetric_cosine_loss(p, z, p, p, strict=True)


def test_loss_stop_gradient_on_z_arguments():
    p1 = Tensor(RNG.normal(size=(2, 5)), requires_grad=True)
    z2 = Tensor(RNG.normal(size=(2, 5)), requires_grad=True)
    loss = symmetric_cosine_loss(p1, z2, p1, z2)
    loss.backward()
    assert p1.grad is not None
    assert z2.grad is None  # constants under differentiation


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------

def test_total_loss_decomposition(tiny_dataset, tiny_encoder, tiny_predictor):
    views = [identity_view(i) for i in tiny_dataset.instances[:3]]
    star = [identity_view(i) for i in tiny_dataset.instances[3:6]]
    # same-subject requirement: build the star list from each view's subject
    star = []
    for v in views:
        inst = sample_cross_task(tiny_dataset, v.subject_id, v.task_id,
                                 np.random.default_rng(0))
        star.append(identity_view(inst))

    tiny_encoder.eval()
    both = float(total_loss(views, views, star, tiny_encoder, tiny_predictor).data)
    term1 = float(total_loss(views, views, None, tiny_encoder, tiny_predictor,
                             task_invariance=False).data)
    term2 = float(total_loss(views, star, None, tiny_encoder, tiny_predictor,
                             task_invariance=False).data)
    assert both == pytest.approx(term1 + term2, abs=1e-12)
    assert -2.0 <= both <= 2.0

    # duplication: x2* with outputs identical to x2 doubles the loss
    doubled = float(total_loss(views, views, views, tiny_encoder, tiny_predictor).data)
    assert doubled == pytest.approx(2 * term1, abs=1e-12)


def test_total_loss_rejects_foreign_subject(tiny_dataset, tiny_encoder, tiny_predictor):
    views = [identity_view(tiny_dataset.instances[0])]
    foreign = [identity_view(next(i for i in tiny_dataset.instances
                                  if i.subject_id != views[0].subject_id))]
    with pytest.raises(ValueError, match="subject"):
        total_loss(views, views, foreign, tiny_encoder, tiny_predictor)


def test_stop_gradient_equals_constant_snapshot(tiny_dataset):
    """Bit-for-bit: stopped gradients match substituting numeric constants."""
    enc = make_tiny_encoder(seed=5)
    pred = build_predictor(enc.config, seed=5)
    enc.train()
    pred.train()
    views1 = [identity_view(i) for i in tiny_dataset.instances[:4]]
    views2 = [identity_view(i) for i in tiny_dataset.instances[4:8]]

    def grads_with(loss_fn):
        for p in enc.parameters() + pred.parameters():
            p.grad = None
        z1 = enc.encode_views(views1)
        z2 = enc.encode_views(views2)
        p1, p2 = pred.forward(z1), pred.forward(z2)
        loss_fn(p1, z2, p2, z1).backward()
        return {name: (p.grad.copy() if p.grad is not None else None)
                for name, p in list(enc.named_parameters()) + list(pred.named_parameters())}

    a = grads_with(symmetric_cosine_loss)

    def snapshot_loss(p1, z2, p2, z1):
        return symmetric_cosine_loss(p1, Tensor(z2.data.copy()), p2, Tensor(z1.data.copy()))

    b = grads_with(snapshot_loss)
    assert set(a) == set(b)
    for name in a:
        assert a[name] is not None, name
        assert a[name].tobytes() == b[name].tobytes(), name


# ---------------------------------------------------------------------------
# cross-task sampling
# ---------------------------------------------------------------------------

def test_cross_task_forced_choice(tiny_dataset):
    subject = tiny_dataset.instances[0].subject_id
    two_tasks = [i for i in tiny_dataset.instances if i.subject_id == subject][:2]
    from brainpair.data import Dataset, PhenotypeTable

    ds2 = Dataset(instances=two_tasks, atlas=tiny_dataset.atlas,
                  phenotypes=PhenotypeTable({}), task_set=tiny_dataset.task_set)
    for seed in range(10):
        got = sample_cross_task(ds2, subject, two_tasks[0].task_id,
                                np.random.default_rng(seed))
        assert got.task_id == two_tasks[1].task_id


def test_cross_task_uniform_frequencies():
    from brainpair.data import BrainGraph, Dataset, PhenotypeTable, TaskInstance
    from conftest import toy_atlas

    atlas = toy_atlas(shape=(3, 3, 3), n_rois=2, seed=0)
    graph = BrainGraph(n=2, node_features=np.eye(2),
                       edge_index=np.empty((0, 2), dtype=np.int64), edge_weight=np.empty(0))
    insts = [TaskInstance(subject_id="s0", task_id=f"t{k}", graph=graph,
                          image=np.zeros(atlas.shape)) for k in range(7)]
    ds = Dataset(instances=insts, atlas=atlas, phenotypes=PhenotypeTable({}),
                 task_set=[f"t{k}" for k in range(7)])
    counts = {}
    for draw in range(7000):
        got = sample_cross_task(ds, "s0", "t0", np.random.default_rng(draw))
        counts[got.task_id] = counts.get(got.task_id, 0) + 1
    assert set(counts) == {f"t{k}" for k in range(1, 7)}
    for task, c in counts.items():
        assert abs(c / 7000 - 1 / 6) < 0.02, (task, c)


def test_cross_task_single_task_subject_errors(tiny_dataset):
    subject = tiny_dataset.instances[0].subject_id
    only = [i for i in tiny_dataset.instances if i.subject_id == subject][:1]
    from brainpair.data import Dataset, PhenotypeTable

    ds1 = Dataset(instances=only, atlas=tiny_dataset.atlas,
                  phenotypes=PhenotypeTable({}), task_set=tiny_dataset.task_set)
    with pytest.raises(ValueError, match=">=2 tasks"):
        sample_cross_task(ds1, subject, only[0].task_id, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# schedule, loop, resume
# ---------------------------------------------------------------------------

def test_lr_schedule():
    cfg = TrainConfig(learning_rate=1e-5)
    assert cfg.lr_at(0) == 1e-5
    assert cfg.lr_at(19) == 1e-5
    assert cfg.lr_at(20) == pytest.approx(0.5e-5)
    assert cfg.lr_at(40) == pytest.approx(0.25e-5)


def test_train_smoke_loss_decreases(tiny_dataset):
    enc = make_tiny_encoder(seed=2)
    pred = build_predictor(enc.config, seed=2)
    res = train_ssl(tiny_dataset, enc, pred,
                    TrainConfig(epochs=3, batch_size=32, learning_rate=0.05, seed=2))
    assert len(res.log.epochs) == 3
    assert res.log.epochs[-1].mean_loss < res.log.epochs[0].mean_loss


def test_train_resume_reproduces_log(tiny_dataset, tmp_path):
    def fresh():
        enc = make_tiny_encoder(seed=9)
        return enc, build_predictor(enc.config, seed=9)

    cfg = TrainConfig(epochs=4, batch_size=16, learning_rate=1e-2, seed=9)
    enc_a, pred_a = fresh()
    full = train_ssl(tiny_dataset, enc_a, pred_a, cfg, log_path=tmp_path / "full.tsv")

    enc_b, pred_b = fresh()
    half_cfg = TrainConfig(epochs=2, batch_size=16, learning_rate=1e-2, seed=9)
    train_ssl(tiny_dataset, enc_b, pred_b, half_cfg, log_path=tmp_path / "resumed.tsv")
    resumed_log = TrainLog()
    # resume: continue the same models from the epoch boundary
    resumed = train_ssl(tiny_dataset, enc_b, pred_b, cfg, start_epoch=2, log=resumed_log,
                        log_path=tmp_path / "resumed.tsv")

    tail = [(s.epoch, s.mean_loss, s.collapse_stat, s.lr) for s in resumed.log.epochs]
    expected = [(s.epoch, s.mean_loss, s.collapse_stat, s.lr) for s in full.log.epochs[2:]]
    assert tail == expected
    assert param_hash(enc_a) == param_hash(enc_b)
    # emitted rows match byte-for-byte as well
    full_rows = (tmp_path / "full.tsv").read_text().splitlines()
    resumed_rows = (tmp_path / "resumed.tsv").read_text().splitlines()
    assert full_rows == resumed_rows


def test_train_requires_two_tasks_when_invariance_on(tiny_dataset):
    from brainpair.data import Dataset, PhenotypeTable

    single = Dataset(
        instances=[i for i in tiny_dataset.instances if i.task_id == "task0"],
        atlas=tiny_dataset.atlas, phenotypes=PhenotypeTable({}),
        task_set=["task0"])
    enc = make_tiny_encoder()
    pred = build_predictor(enc.config, seed=0)
    with pytest.raises(ValueError, match=">=2 tasks"):
        train_ssl(single, enc, pred, TrainConfig(epochs=1, seed=0))
    res = train_ssl(single, enc, pred,
                    TrainConfig(epochs=1, batch_size=32, learning_rate=1e-4,
                                task_invariance=False, seed=0))
    assert len(res.log.epochs) == 1


def test_nonfinite_loss_aborts(tiny_dataset):
    enc = make_tiny_encoder()
    pred = build_predictor(enc.config, seed=0)
    enc.projection.fc2.W.data = np.full_like(enc.projection.fc2.W.data, np.inf)
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train_ssl(tiny_dataset, enc, pred,
                  TrainConfig(epochs=1, batch_size=32, learning_rate=1e-4, seed=0))


def test_trainlog_file_format(tiny_dataset, tmp_path):
    enc = make_tiny_encoder()
    pred = build_predictor(enc.config, seed=0)
    path = tmp_path / "log.tsv"
    train_ssl(tiny_dataset, enc, pred,
              TrainConfig(epochs=2, batch_size=32, learning_rate=1e-4, seed=0),
              log_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch\tmean_loss\tcollapse_stat\tlr"
    assert len(lines) == 3
    first = lines[1].split("\t")
    assert first[0] == "0" and len(first) == 4
    float(first[1]), float(first[2]), float(first[3])


# ---------------------------------------------------------------------------
# collapse statistic and weight decay
# ---------------------------------------------------------------------------

def test_collapse_statistic_identical_rows():
    z = np.tile(RNG.normal(size=16), (8, 1))
    assert collapse_statistic(z) == 0.0


def test_collapse_statistic_one_hot_rows():
    z = np.eye(4)
    # direct computation on the normalized batch
    expected = np.eye(4).std(axis=0).mean()
    assert collapse_statistic(z) == pytest.approx(expected, abs=1e-12)


def test_collapse_statistic_gaussian_band():
    d = 64
    z = np.random.default_rng(0).normal(size=(512, d))
    stat = collapse_statistic(z)
    assert 0.8 / np.sqrt(d) < stat < 1.2 / np.sqrt(d)


def test_collapse_statistic_needs_batch():
    with pytest.raises(ValueError, match="2 rows"):
        collapse_statistic(np.ones((1, 4)))


def test_weight_decay_exact_shrink():
    p = Tensor(RNG.normal(size=(3, 3)).astype(np.float64), requires_grad=True)
    start = p.data.copy()
    opt = SGD([p], lr=0.1, weight_decay=0.01)
    opt.step()  # no gradient: pure decay
    np.testing.assert_array_equal(p.data, start - 0.1 * (0.01 * start))
