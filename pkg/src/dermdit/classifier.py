"""Downstream benign/malignant classifier and subgroup-stratified metrics.

A small staged residual CNN stands in for a large diagnosis backbone.
It trains on binary cross-entropy with lowest-validation-loss checkpoint
selection, and its penultimate activations double as the fine-tuned
feature extractor for Frechet-distance evaluation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import nn
from .data import DatasetManifest, ManifestRecord
from .metrics import FeatureSet
from .nn import ParamStore, Tensor

__all__ = [
    "ClassifierConfig",
    "ClassifierModel",
    "RecallF1",
    "SubgroupMetrics",
    "init_classifier",
    "train_classifier",
    "predict_scores",
    "extract_features",
    "auc",
    "recall_f1",
    "evaluate_by_subgroup",
]

_LABEL_OF = {"benign": 0.0, "malignant": 1.0}


@dataclass(frozen=True)
class ClassifierConfig:
    in_channels: int = 3
    widths: tuple = (16, 32, 64, 128)
    feature_dim: int = 128
    batch_size: int = 64
    epochs: int = 10
    lr: float = 3e-4
    seed: int = 0

    def __post_init__(self):
        if self.widths[-1] != self.feature_dim:
            raise ValueError("feature_dim must equal the last stage width")


@dataclass
class ClassifierModel:
    config: ClassifierConfig
    params: ParamStore

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def extractor_id(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params.names()):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return f"clf-{h.hexdigest()[:12]}"


def init_classifier(config: ClassifierConfig) -> ClassifierModel:
    rng = np.random.default_rng(config.seed)
    ps = ParamStore()

    def conv(name, c_in, c_out, k):
        fan_in = c_in * k * k
        ps.add(f"{name}.w", rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in))
        ps.add(f"{name}.b", np.zeros(c_out))

    c_prev = config.in_channels
    for i, width in enumerate(config.widths):
        conv(f"stage{i}.down", c_prev, width, 3)   # stride-2 downsample
        conv(f"stage{i}.conv", width, width, 3)    # residual branch
        c_prev = width
    ps.add("head.w", np.zeros((config.feature_dim, 1)))
    ps.add("head.b", np.zeros(1))
    return ClassifierModel(config=config, params=ps)


def _features_t(model: ClassifierModel, images: Tensor) -> Tensor:
    """Penultimate activations [B, feature_dim] (global average pooled)."""
    ps = model.params
    h = images
    for i in range(len(model.config.widths)):
        h = nn.relu(nn.conv2d(h, ps[f"stage{i}.down.w"], ps[f"stage{i}.down.b"],
                              stride=2, padding=1))
        r = nn.relu(nn.conv2d(h, ps[f"stage{i}.conv.w"], ps[f"stage{i}.conv.b"],
                              padding=1))
        h = nn.add(h, r)
    return nn.tmean(h, axis=(2, 3))


def _logits_t(model: ClassifierModel, images: Tensor) -> Tensor:
    feats = _features_t(model, images)
    return nn.linear(feats, model.params["head.w"], model.params["head.b"])


def predict_scores(model: ClassifierModel, images: np.ndarray,
                   batch_size: int = 256) -> np.ndarray:
    """Sigmoid of the malignancy logit per image; pure given the model."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    for lo in range(0, len(images), batch_size):
        logits = _logits_t(model, Tensor(images[lo : lo + batch_size]))
        out.append(logits.data.reshape(-1))
    from scipy.special import expit

    return expit(np.concatenate(out)) if out else np.zeros(0)


def extract_features(model: ClassifierModel, images: np.ndarray,
                     batch_size: int = 256) -> FeatureSet:
    """Penultimate-layer activations as a FeatureSet."""
    images = np.asarray(images, dtype=np.float32)
    rows = []
    for lo in range(0, len(images), batch_size):
        rows.append(_features_t(model, Tensor(images[lo : lo + batch_size])).data)
    emb = np.concatenate(rows) if rows else np.zeros((0, model.feature_dim))
    return FeatureSet(embeddings=emb, extractor_id=model.extractor_id)


def train_classifier(
    manifest: DatasetManifest,
    config: ClassifierConfig = ClassifierConfig(),
    resolution: int = 32,
    log_path: str | Path | None = None,
    images_by_split: dict | None = None,
) -> ClassifierModel:
    """Train on the manifest's train split, select lowest validation loss.

    ``images_by_split`` may carry preloaded (images, labels) pairs keyed
    by split name to skip PNG decoding. A training set with a single
    class is rejected. The log CSV has one row per step (epoch, step,
    train loss) and one per epoch end with the validation loss.
    """

    def load_split(name: str):
        if images_by_split is not None and name in images_by_split:
            return images_by_split[name]
        records = manifest.split(name)
        if not records:
            return np.zeros((0, config.in_channels, resolution, resolution),
                            dtype=np.float32), np.zeros(0)
        images = np.stack([manifest.load_image(r, resolution) for r in records])
        labels = np.array([_LABEL_OF[r.diagnosis] for r in records], dtype=np.float32)
        return images, labels

    x_train, y_train = load_split("train")
    x_val, y_val = load_split("val")
    if len(x_train) == 0:
        raise ValueError("no training records")
    if len(np.unique(y_train)) < 2:
        raise ValueError("training set has a single class")
    if len(x_val) == 0:
        # fall back to evaluating on the training set, flagged in the log
        x_val, y_val = x_train, y_train

    model = init_classifier(config)
    n = len(x_train)
    steps_per_epoch = -(-n // config.batch_size)  # ceil
    best_loss = np.inf
    best_state: dict[str, np.ndarray] = {
        name: p.data.copy() for name, p in model.params.items()
    }
    log_rows: list[tuple] = []

    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, epoch)))
        order = rng.permutation(n)
        for step in range(steps_per_epoch):
            idx = order[step * config.batch_size : (step + 1) * config.batch_size]
            xb = Tensor(x_train[idx])
            yb = y_train[idx].reshape(-1, 1)
            with nn.GradTape() as tape:
                logits = _logits_t(model, xb)
                loss = nn.bce_with_logits(logits, yb)
                grads = nn.grad(loss, tape)
            nn.adam_step(model.params, grads, config.lr)
            log_rows.append((epoch, step + 1, float(loss.data), ""))
        val_loss = _bce_eval(model, x_val, y_val)
        log_rows.append((epoch, steps_per_epoch, "", float(val_loss)))
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = {name: p.data.copy() for name, p in model.params.items()}

    for name, value in best_state.items():
        model.params.set_data(name, value)
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "step", "train_loss", "val_loss"])
            writer.writerows(log_rows)
    return model


def _bce_eval(model: ClassifierModel, images: np.ndarray, labels: np.ndarray) -> float:
    total, count = 0.0, 0
    for lo in range(0, len(images), 256):
        logits = _logits_t(model, Tensor(images[lo : lo + 256])).data.reshape(-1)
        y = labels[lo : lo + 256]
        loss = np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
        total += float(loss.sum())
        count += len(y)
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# ranking and confusion metrics
# ---------------------------------------------------------------------------

def auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted one half, evaluated exactly.

    Wins and ties are counted by a sort-and-sweep, and the final ratio
    is formed as an exact rational before conversion to float.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    wins = 0
    ties = 0
    neg_below = 0
    i = 0
    while i < len(s_sorted):
        j = i
        while j < len(s_sorted) and s_sorted[j] == s_sorted[i]:
            j += 1
        pos_here = int(l_sorted[i:j].sum())
        neg_here = (j - i) - pos_here
        wins += pos_here * neg_below
        ties += pos_here * neg_here
        neg_below += neg_here
        i = j
    return float(Fraction(2 * wins + ties, 2 * n_pos * n_neg))


@dataclass(frozen=True)
class RecallF1:
    recall: float
    f1: float
    f1_degenerate: bool = False  # set when precision + recall was zero


def recall_f1(scores, labels, threshold: float = 0.5) -> RecallF1:
    """Recall and F1 at a score threshold (prediction = score >= threshold).

    No positive labels is an error; zero precision-plus-recall yields an
    F1 of 0 with the degenerate flag set.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    preds = (scores >= threshold).astype(int)
    tp = int(((preds == 1) & (labels == 1)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    if tp + fn == 0:
        raise ValueError("recall undefined: no positive labels")
    recall = tp / (tp + fn)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    if precision + recall == 0:
        return RecallF1(recall=recall, f1=0.0, f1_degenerate=True)
    f1 = 2 * precision * recall / (precision + recall)
    return RecallF1(recall=recall, f1=f1)


@dataclass(frozen=True)
class SubgroupMetrics:
    subgroup: dict
    support: int
    auc: float | None
    recall: float | None
    f1: float | None
    flags: tuple = ()


def evaluate_by_subgroup(
    model: ClassifierModel,
    manifest: DatasetManifest,
    group_by: list[str],
    split: str = "test",
    resolution: int = 32,
    threshold: float = 0.5,
    images_and_labels=None,
) -> list[SubgroupMetrics]:
    """Overall plus per-subgroup AUC / recall / F1 on a manifest split.

    The first returned row is the overall one (empty subgroup key).
    Subgroups missing a class report the affected metrics as None with a
    flag rather than failing the whole evaluation.
    """
    records = manifest.split(split)
    if not records:
        raise ValueError(f"no records in split {split!r}")
    for attr in group_by:
        missing = [r for r in records if getattr(r, attr, None) is None]
        if missing:
            raise ValueError(
                f"attribute {attr!r} missing on {len(missing)} records"
            )
    if images_and_labels is not None:
        images, labels = images_and_labels
    else:
        images = np.stack([manifest.load_image(r, resolution) for r in records])
        labels = np.array([_LABEL_OF[r.diagnosis] for r in records])
    scores = predict_scores(model, images)

    def metrics_for(sel: np.ndarray, key: dict) -> SubgroupMetrics:
        y = labels[sel].astype(int)
        s = scores[sel]
        flags = []
        auc_value: float | None = None
        if 0 < y.sum() < len(y):
            auc_value = auc(s, y)
        else:
            flags.append("auc_undefined_single_class")
        recall_value: float | None = None
        f1_value: float | None = None
        if y.sum() > 0:
            rf = recall_f1(s, y, threshold)
            recall_value, f1_value = rf.recall, rf.f1
            if rf.f1_degenerate:
                flags.append("f1_degenerate")
        else:
            flags.append("recall_undefined_no_positives")
        return SubgroupMetrics(
            subgroup=key, support=int(sel.sum()), auc=auc_value,
            recall=recall_value, f1=f1_value, flags=tuple(flags),
        )

    results = [metrics_for(np.ones(len(records), dtype=bool), {})]
    keys = sorted({tuple(getattr(r, a) for a in group_by) for r in records})
    for key in keys:
        sel = np.array(
            [tuple(getattr(r, a) for a in group_by) == key for r in records]
        )
        results.append(metrics_for(sel, dict(zip(group_by, key))))
    return results
