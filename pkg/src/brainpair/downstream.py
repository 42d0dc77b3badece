"""Downstream evaluation: MLP probing on the frozen encoder, end-to-end
fine-tuning, supervised-from-scratch baselines, subject-level aggregation,
metrics, and the cross-validated harness.

Probing never touches encoder state (parameters or normalization
statistics); embeddings are computed once per checkpoint and reused across
folds.  Fine-tuning keeps normalization in running-statistics mode so a
zero learning rate is a strict no-op.  Regression heads are fit on
standardized targets and predictions are mapped back, so the default head
learning rate works regardless of the label scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.stats import rankdata

from .augment import identity_view
from .autodiff import Tensor
from .data import Dataset, FoldSplit, check_no_leakage
from .model import EncoderConfig, GraphImageEncoder, TaskHead, build_task_head, clone_encoder
from .nn import SGD, param_hash

CLASSIFICATION = "classification"
REGRESSION = "regression"


@dataclass
class DownstreamConfig:
    probe_epochs: int = 100
    probe_lr: float = 1e-3
    finetune_epochs: int = 10
    finetune_lr: float = 1e-4
    supervised_epochs: int = 30
    supervised_lr: float = 1e-3
    batch_size: int = 128
    weight_decay: float = 1e-3
    head_hidden: tuple[int, ...] | None = None
    seed: int = 0


@dataclass
class FittedHead:
    head: TaskHead
    kind: str
    target_mean: float = 0.0
    target_std: float = 1.0
    # per-channel input standardization, fitted on training-fold embeddings
    # (probe path only; joint modes see live batch-standardized encodings)
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None

    def transform_inputs(self, embeddings: np.ndarray) -> np.ndarray:
        if self.input_mean is None:
            return embeddings
        return (embeddings - self.input_mean) / self.input_std


# ---------------------------------------------------------------------------
# losses on logits
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    shift = logits.max(axis=-1, keepdims=True).detach()
    lse = (logits - shift).exp().sum(axis=-1, keepdims=True).log() + shift
    logp = logits - lse
    rows = np.arange(len(labels))
    return -(logp[rows, np.asarray(labels, dtype=np.int64)].mean())


def mse(pred: Tensor, targets: np.ndarray) -> Tensor:
    diff = pred.reshape(-1) - np.asarray(targets, dtype=np.float64).astype(pred.dtype)
    return (diff * diff).mean()


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# embedding cache
# ---------------------------------------------------------------------------

def embed_instances(encoder: GraphImageEncoder, instances, batch_size: int = 128) -> np.ndarray:
    """Eval-mode representations, chunked; (N, d) float array."""
    encoder.eval()
    chunks = []
    views = [identity_view(inst) for inst in instances]
    for lo in range(0, len(views), batch_size):
        chunks.append(encoder.encode_views(views[lo: lo + batch_size]).data)
    return np.concatenate(chunks, axis=0) if chunks else np.empty((0, encoder.out_dim))


# ---------------------------------------------------------------------------
# head / model fitting
# ---------------------------------------------------------------------------

def _labels_for(instances, labels_by_subject: dict[str, float], kind: str) -> np.ndarray:
    vals = []
    for inst in instances:
        if inst.subject_id not in labels_by_subject:
            raise ValueError(f"label missing for subject {inst.subject_id!r}")
        vals.append(labels_by_subject[inst.subject_id])
    arr = np.asarray(vals)
    return arr.astype(np.int64) if kind == CLASSIFICATION else arr.astype(np.float64)


def _fit_head_on_embeddings(embeddings: np.ndarray, labels: np.ndarray, fitted: FittedHead,
                            epochs: int, lr: float, cfg: DownstreamConfig, seed_key: tuple) -> None:
    n = embeddings.shape[0]
    embeddings = fitted.transform_inputs(embeddings)
    opt = SGD(fitted.head.parameters(), lr=lr, weight_decay=cfg.weight_decay)
    targets = labels
    if fitted.kind == REGRESSION:
        targets = (labels - fitted.target_mean) / fitted.target_std
    for epoch in range(epochs):
        order = np.random.default_rng((*seed_key, 41, epoch)).permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo: lo + cfg.batch_size]
            x = Tensor(embeddings[idx])
            out = fitted.head.forward(x)
            loss = (cross_entropy(out, targets[idx]) if fitted.kind == CLASSIFICATION
                    else mse(out, targets[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()


def make_fitted_head(config: EncoderConfig, kind: str, labels: np.ndarray,
                     cfg: DownstreamConfig, seed_key: tuple) -> FittedHead:
    head = build_task_head(config, kind, seed=seed_key, hidden=cfg.head_hidden)
    if kind == REGRESSION:
        std = float(labels.std())
        return FittedHead(head, kind, target_mean=float(labels.mean()),
                          target_std=std if std > 0 else 1.0)
    return FittedHead(head, kind)


def train_probe(encoder: GraphImageEncoder, fitted: FittedHead, instances,
                labels_by_subject: dict[str, float], cfg: DownstreamConfig,
                embeddings: np.ndarray | None = None,
                seed_key: tuple | None = None) -> FittedHead:
    """Fit only the head on frozen eval-mode representations.

    Encoder parameters and statistics are untouched (guarded by a state
    hash).  Precomputed ``embeddings`` for ``instances`` may be passed to
    skip re-encoding.
    """
    seed_key = seed_key or (cfg.seed,)
    labels = _labels_for(instances, labels_by_subject, fitted.kind)
    before = param_hash(encoder)
    if embeddings is None:
        embeddings = embed_instances(encoder, instances, cfg.batch_size)
    std = embeddings.std(axis=0)
    fitted.input_mean = embeddings.mean(axis=0)
    fitted.input_std = np.where(std > 1e-8, std, 1.0)
    _fit_head_on_embeddings(embeddings, labels, fitted, cfg.probe_epochs, cfg.probe_lr,
                            cfg, seed_key)
    after = param_hash(encoder)
    if before != after:
        raise RuntimeError("probe mutated encoder state")
    return fitted


def _fit_jointly(encoder: GraphImageEncoder, fitted: FittedHead, instances,
                 labels: np.ndarray, epochs: int, lr: float, cfg: DownstreamConfig,
                 seed_key: tuple, encoder_mode: str) -> None:
    views = [identity_view(inst) for inst in instances]
    params = list(encoder.parameters()) + list(fitted.head.parameters())
    opt = SGD(params, lr=lr, weight_decay=cfg.weight_decay)
    targets = labels
    if fitted.kind == REGRESSION:
        targets = (labels - fitted.target_mean) / fitted.target_std
    n = len(views)
    for epoch in range(epochs):
        encoder.set_mode(encoder_mode)
        order = np.random.default_rng((*seed_key, 43, epoch)).permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo: lo + cfg.batch_size]
            z = encoder.encode_views([views[int(i)] for i in idx])
            out = fitted.head.forward(z)
            loss = (cross_entropy(out, targets[idx]) if fitted.kind == CLASSIFICATION
                    else mse(out, targets[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()


def finetune(encoder: GraphImageEncoder, fitted: FittedHead, instances,
             labels_by_subject: dict[str, float], cfg: DownstreamConfig,
             seed_key: tuple | None = None) -> tuple[GraphImageEncoder, FittedHead]:
    """Update encoder and head jointly from the pretrained initialization.

    Normalization runs on the stored running statistics ("frozen" mode), so
    the pretrained statistics survive and lr=0 changes nothing.
    """
    seed_key = seed_key or (cfg.seed,)
    labels = _labels_for(instances, labels_by_subject, fitted.kind)
    _fit_jointly(encoder, fitted, instances, labels, cfg.finetune_epochs, cfg.finetune_lr,
                 cfg, seed_key, encoder_mode="frozen")
    return encoder, fitted


def train_supervised(encoder: GraphImageEncoder, fitted: FittedHead, instances,
                     labels_by_subject: dict[str, float], cfg: DownstreamConfig,
                     seed_key: tuple | None = None) -> tuple[GraphImageEncoder, FittedHead]:
    """From-scratch supervised baseline on the same architecture
    (batch statistics live during training)."""
    seed_key = seed_key or (cfg.seed,)
    labels = _labels_for(instances, labels_by_subject, fitted.kind)
    _fit_jointly(encoder, fitted, instances, labels, cfg.supervised_epochs, cfg.supervised_lr,
                 cfg, seed_key, encoder_mode="train")
    return encoder, fitted


def predict_instances(encoder: GraphImageEncoder, fitted: FittedHead, instances,
                      embeddings: np.ndarray | None = None,
                      batch_size: int = 128) -> list[tuple[str, np.ndarray | float]]:
    """Per-instance predictions: class probability vectors, or scalars."""
    if embeddings is None:
        embeddings = embed_instances(encoder, instances, batch_size)
    out = fitted.head.forward(Tensor(fitted.transform_inputs(embeddings))).data
    preds: list[tuple[str, np.ndarray | float]] = []
    for inst, row in zip(instances, out):
        if fitted.kind == CLASSIFICATION:
            preds.append((inst.subject_id, _softmax(row[None, :])[0]))
        else:
            preds.append((inst.subject_id, float(row[0]) * fitted.target_std + fitted.target_mean))
    return preds


# ---------------------------------------------------------------------------
# aggregation and metrics
# ---------------------------------------------------------------------------

def aggregate_subject_predictions(predictions: Iterable[tuple[str, np.ndarray | float]],
                                  kind: str) -> dict[str, np.ndarray | float]:
    """Average a subject's per-instance predictions: mean probability vector
    for classification (argmax gives the hard label), mean value for regression."""
    grouped: dict[str, list] = {}
    for subject, value in predictions:
        grouped.setdefault(subject, []).append(value)
    out: dict[str, np.ndarray | float] = {}
    for subject, values in grouped.items():
        if kind == CLASSIFICATION:
            out[subject] = np.mean(np.stack(values), axis=0)
        else:
            out[subject] = float(np.mean(values))
    return out


def evaluate_classification(scores: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """Binary metrics from positive-class scores in [0, 1].

    Accuracy thresholds at 0.5 (score >= 0.5 predicts positive); F1 is for
    the positive class (0 when no true or predicted positives exist); AUC is
    the pairwise comparison probability with ties counted 0.5, computed via
    midranks.  A single-class label set makes AUC undefined (error).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1D arrays")
    if scores.min(initial=0.0) < 0 or scores.max(initial=0.0) > 1:
        raise ValueError("scores must lie in [0, 1]")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined for a single-class label set")

    pred = scores >= 0.5
    acc = float((pred == (labels == 1)).mean())
    tp = float(np.sum(pred & (labels == 1)))
    fp = float(np.sum(pred & (labels == 0)))
    fn = float(np.sum(~pred & (labels == 1)))
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0

    ranks = rankdata(scores, method="average")
    auc = (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    return {"acc": acc, "f1": f1, "auc": float(auc)}


def evaluate_regression(predictions: np.ndarray, targets: np.ndarray) -> dict[str, float]:
    """MAE and Pearson r; zero-variance predictions (or targets) report r=0
    with a ``degenerate`` flag instead of NaN."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.ndim != 1:
        raise ValueError("predictions and targets must be equal-length 1D arrays")
    if predictions.size < 2:
        raise ValueError("need at least 2 samples for correlation")
    mae = float(np.abs(predictions - targets).mean())
    pc = predictions - predictions.mean()
    tc = targets - targets.mean()
    denom = np.sqrt((pc * pc).sum() * (tc * tc).sum())
    if denom == 0:
        return {"mae": mae, "r": 0.0, "degenerate": 1.0}
    return {"mae": mae, "r": float((pc * tc).sum() / denom), "degenerate": 0.0}


# ---------------------------------------------------------------------------
# cross-validated harness
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    mode: str
    phenotype: str
    kind: str
    k: int
    metric_names: list[str]
    per_fold: list[dict[str, float]]
    per_fold_instance: list[dict[str, float]]
    flags: list[str] = field(default_factory=list)

    def summary(self) -> dict[str, tuple[float, float]]:
        out = {}
        for name in self.metric_names:
            vals = np.array([f.get(name, np.nan) for f in self.per_fold], dtype=np.float64)
            out[name] = (float(np.nanmean(vals)), float(np.nanstd(vals)))
        return out

    def to_table(self) -> str:
        cols = self.metric_names + [f"instance_{m}" for m in self.metric_names]
        lines = ["\t".join(["fold"] + cols)]
        for f in range(self.k):
            row = [str(f)]
            row += [repr(self.per_fold[f].get(m, float("nan"))) for m in self.metric_names]
            row += [repr(self.per_fold_instance[f].get(m, float("nan"))) for m in self.metric_names]
            lines.append("\t".join(row))
        summ = self.summary()
        inst_summ = {
            name: (
                float(np.nanmean([f.get(name, np.nan) for f in self.per_fold_instance])),
                float(np.nanstd([f.get(name, np.nan) for f in self.per_fold_instance])),
            )
            for name in self.metric_names
        }
        for stat_name, pick in (("mean", 0), ("std", 1)):
            row = [stat_name]
            row += [repr(summ[m][pick]) for m in self.metric_names]
            row += [repr(inst_summ[m][pick]) for m in self.metric_names]
            lines.append("\t".join(row))
        if self.flags:
            lines.append("# flags: " + "; ".join(self.flags))
        return "\n".join(lines) + "\n"


def _metrics_for(kind: str, preds: dict[str, np.ndarray | float],
                 labels_by_subject: dict[str, float], subjects: list[str],
                 flags: list[str], tag: str) -> dict[str, float]:
    if kind == CLASSIFICATION:
        scores = np.array([preds[s][1] for s in subjects])
        labels = np.array([int(labels_by_subject[s]) for s in subjects])
        try:
            return evaluate_classification(scores, labels)
        except ValueError as exc:
            flags.append(f"{tag}: {exc}")
            return {"acc": np.nan, "f1": np.nan, "auc": np.nan}
    values = np.array([preds[s] for s in subjects])
    targets = np.array([labels_by_subject[s] for s in subjects])
    res = evaluate_regression(values, targets)
    if res.pop("degenerate", 0.0):
        flags.append(f"{tag}: zero-variance predictions, r reported as 0")
    return res


def _instance_metrics(kind: str, pred_list, labels_by_subject, flags, tag):
    subjects = [s for s, _ in pred_list]
    if kind == CLASSIFICATION:
        scores = np.array([v[1] for _, v in pred_list])
        labels = np.array([int(labels_by_subject[s]) for s in subjects])
        try:
            return evaluate_classification(scores, labels)
        except ValueError as exc:
            flags.append(f"{tag} (instance): {exc}")
            return {"acc": np.nan, "f1": np.nan, "auc": np.nan}
    values = np.array([v for _, v in pred_list])
    targets = np.array([labels_by_subject[s] for s in subjects])
    res = evaluate_regression(values, targets)
    res.pop("degenerate", None)
    return res


def run_cv(dataset: Dataset, folds: FoldSplit, mode: str, phenotype: str,
           cfg: DownstreamConfig, encoder: GraphImageEncoder | None = None,
           model_config: EncoderConfig | None = None, jobs: int = 1) -> MetricReport:
    """Cross-validated evaluation in one of three modes.

    probe      - frozen pretrained encoder, per-fold heads;
    finetune   - per-fold copy of the pretrained encoder, trained jointly;
    supervised - per-fold fresh encoder of the same architecture.

    Held-out metrics are subject-level (instance predictions averaged per
    subject); instance-level metrics are logged alongside.
    """
    if mode not in ("probe", "finetune", "supervised"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode in ("probe", "finetune") and encoder is None:
        raise ValueError(f"mode {mode!r} requires a pretrained encoder")
    if mode == "supervised":
        if model_config is None:
            raise ValueError("supervised mode requires a model config")
    else:
        model_config = encoder.config

    kind = CLASSIFICATION if dataset.phenotypes.kind(phenotype) == "categorical" else REGRESSION
    labels_by_subject = {
        s: dataset.phenotypes.value(phenotype, s) for s in dataset.subjects()
    }
    if kind == CLASSIFICATION:
        classes = sorted({int(v) for v in labels_by_subject.values()})
        if len(classes) != 2:
            raise ValueError(f"classification phenotype must be binary, got classes {classes}")

    check_no_leakage(folds)
    shared_embeddings = None
    if mode == "probe":
        shared_embeddings = embed_instances(encoder, dataset.instances, cfg.batch_size)
    index_by_id = {id(inst): i for i, inst in enumerate(dataset.instances)}

    def run_fold(fold: int) -> tuple[dict, dict, list[str]]:
        flags: list[str] = []
        train_subjects, test_subjects = folds.train_test_subjects(fold)
        if set(train_subjects) & set(test_subjects):
            raise RuntimeError("subject leakage detected")
        train_insts = [i for i in dataset.instances if i.subject_id in set(train_subjects)]
        test_insts = [i for i in dataset.instances if i.subject_id in set(test_subjects)]
        seed_key = (cfg.seed, fold)
        train_labels = _labels_for(train_insts, labels_by_subject, kind)
        fitted = make_fitted_head(model_config, kind, train_labels, cfg, seed_key)

        if mode == "probe":
            emb_train = shared_embeddings[[index_by_id[id(i)] for i in train_insts]]
            emb_test = shared_embeddings[[index_by_id[id(i)] for i in test_insts]]
            train_probe(encoder, fitted, train_insts, labels_by_subject, cfg,
                        embeddings=emb_train, seed_key=seed_key)
            preds = predict_instances(encoder, fitted, test_insts, embeddings=emb_test)
        elif mode == "finetune":
            enc_f = clone_encoder(encoder)
            finetune(enc_f, fitted, train_insts, labels_by_subject, cfg, seed_key=seed_key)
            enc_f.eval()
            preds = predict_instances(enc_f, fitted, test_insts, batch_size=cfg.batch_size)
        else:
            enc_f = GraphImageEncoder(model_config, seed=seed_key)
            train_supervised(enc_f, fitted, train_insts, labels_by_subject, cfg,
                             seed_key=seed_key)
            enc_f.eval()
            preds = predict_instances(enc_f, fitted, test_insts, batch_size=cfg.batch_size)

        subject_preds = aggregate_subject_predictions(preds, kind)
        fold_metrics = _metrics_for(kind, subject_preds, labels_by_subject,
                                    sorted(subject_preds), flags, f"fold{fold}")
        inst_metrics = _instance_metrics(kind, preds, labels_by_subject, flags, f"fold{fold}")
        return fold_metrics, inst_metrics, flags

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_fold, range(folds.k)))
    else:
        results = [run_fold(f) for f in range(folds.k)]

    per_fold = [r[0] for r in results]
    per_fold_instance = [r[1] for r in results]
    flags = [msg for r in results for msg in r[2]]
    metric_names = ["acc", "f1", "auc"] if kind == CLASSIFICATION else ["mae", "r"]
    return MetricReport(
        mode=mode, phenotype=phenotype, kind=kind, k=folds.k,
        metric_names=metric_names, per_fold=per_fold,
        per_fold_instance=per_fold_instance, flags=flags,
    )
