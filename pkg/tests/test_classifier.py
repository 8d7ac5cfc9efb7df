"""Classifier tests: ranking metrics, confusion metrics, training, features."""

import numpy as np
import pytest

from dermdit.classifier import (
    ClassifierConfig,
    auc,
    evaluate_by_subgroup,
    extract_features,
    init_classifier,
    predict_scores,
    recall_f1,
    train_classifier,
)
from dermdit.data import DatasetManifest, ManifestRecord


class TestAuc:
    def test_perfect_ranking(self):
        assert auc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0

    def test_inverted(self):
        assert auc([0.2, 0.9], [1, 0]) == 0.0

    def test_tie_convention(self):
        assert auc([0.5, 0.5], [1, 0]) == 0.5

    def test_exact_against_brute_force(self):
        rng = np.random.default_rng(0)
        for trial in range(200):
            n = int(rng.integers(2, 51))
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            # quantized scores force plenty of ties
            scores = np.round(rng.random(n), 1)
            wins = ties = 0
            for i in np.flatnonzero(labels == 1):
                for j in np.flatnonzero(labels == 0):
                    if scores[i] > scores[j]:
                        wins += 1
                    elif scores[i] == scores[j]:
                        ties += 1
            n_pos = int(labels.sum())
            n_neg = n - n_pos
            expected = (wins + 0.5 * ties) / (n_pos * n_neg)
            assert auc(scores, labels) == expected, trial

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        scores = rng.random(40)
        labels = rng.integers(0, 2, size=40)
        labels[0], labels[1] = 0, 1
        base = auc(scores, labels)
        assert auc(scores * 10 + 3, labels) == base
        assert auc(np.exp(scores), labels) == base

    def test_single_class_error(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [1, 1])


class TestRecallF1:
    def test_perfect(self):
        out = recall_f1([0.9, 0.8, 0.1], [1, 1, 0])
        assert out.recall == 1.0 and out.f1 == 1.0

    def test_all_predicted_negative_flags_f1(self):
        out = recall_f1([0.1, 0.2, 0.3], [1, 1, 0])
        assert out.recall == 0.0
        assert out.f1 == 0.0
        assert out.f1_degenerate

    def test_hand_confusion_matrix(self):
        # TP=1, FP=1, FN=1 -> recall 0.5, precision 0.5, f1 0.5
        out = recall_f1([0.9, 0.9, 0.1], [1, 0, 1])
        assert out.recall == 0.5 and out.f1 == 0.5

    def test_threshold_inclusive(self):
        out = recall_f1([0.5], [1], threshold=0.5)
        assert out.recall == 1.0

    def test_no_positives_error(self):
        with pytest.raises(ValueError):
            recall_f1([0.5, 0.4], [0, 0])

    def test_enumerated_small_cases(self):
        cases = [
            ([1, 1, 0, 0], [0.9, 0.6, 0.4, 0.1], 1.0, 1.0),
            ([1, 0, 1, 0], [0.9, 0.8, 0.2, 0.1], 0.5, 0.5),
            ([1, 1, 1, 0], [0.9, 0.6, 0.6, 0.6], 1.0, 0.857142857142857),
        ]
        for labels, scores, want_recall, want_f1 in cases:
            out = recall_f1(scores, labels)
            assert np.isclose(out.recall, want_recall)
            assert np.isclose(out.f1, want_f1)


def _separable_arrays(n, rng, flip=0.0):
    """Binary toy: positives bright on the right, negatives on the left."""
    images = rng.normal(0, 0.15, size=(n, 3, 32, 32)).astype(np.float32)
    labels = (np.arange(n) % 2).astype(np.float32)
    for i in range(n):
        half = slice(16, None) if labels[i] else slice(None, 16)
        images[i, :, :, half] += 0.8
    return np.clip(images, -1, 1), labels


def _manifest_from_arrays(n):
    records = [
        ManifestRecord(image=f"img_{i}.png", diagnosis="malignant" if i % 2 else "benign",
                       skin_tone=("light", "brown", "dark")[i % 3],
                       split="train" if i < int(0.8 * n) else "val")
        for i in range(n)
    ]
    return DatasetManifest(root=None, records=records)


class TestTrainClassifier:
    def test_separable_set_high_accuracy(self, rng):
        n = 96
        images, labels = _separable_arrays(n, rng)
        manifest = _manifest_from_arrays(n)
        split_at = int(0.8 * n)
        model = train_classifier(
            manifest,
            ClassifierConfig(epochs=4, batch_size=32, lr=1e-3, seed=0),
            images_by_split={
                "train": (images[:split_at], labels[:split_at]),
                "val": (images[split_at:], labels[split_at:]),
            },
        )
        scores = predict_scores(model, images[split_at:])
        accuracy = ((scores >= 0.5) == labels[split_at:]).mean()
        assert accuracy > 0.95
        # measured separation: malignant-analogue scores above benign-analogue
        assert scores[labels[split_at:] == 1].mean() > scores[labels[split_at:] == 0].mean()

    def test_step_bookkeeping_one_epoch(self, tmp_path, rng):
        n = 150
        images, labels = _separable_arrays(n, rng)
        manifest = _manifest_from_arrays(n)
        split_at = int(0.8 * n)  # 120 train rows -> ceil(120/64) = 2 steps
        log = tmp_path / "log.csv"
        train_classifier(
            manifest, ClassifierConfig(epochs=1, batch_size=64, seed=0),
            log_path=log,
            images_by_split={
                "train": (images[:split_at], labels[:split_at]),
                "val": (images[split_at:], labels[split_at:]),
            },
        )
        rows = log.read_text().splitlines()[1:]
        train_rows = [r for r in rows if r.split(",")[2] != ""]
        assert len(train_rows) == int(np.ceil(split_at / 64))

    def test_deterministic_selection(self, rng):
        n = 64
        images, labels = _separable_arrays(n, rng)
        manifest = _manifest_from_arrays(n)
        split_at = int(0.8 * n)
        kwargs = dict(
            images_by_split={
                "train": (images[:split_at], labels[:split_at]),
                "val": (images[split_at:], labels[split_at:]),
            },
        )
        m1 = train_classifier(manifest, ClassifierConfig(epochs=2, seed=5), **kwargs)
        m2 = train_classifier(manifest, ClassifierConfig(epochs=2, seed=5), **kwargs)
        for name, p in m1.params.items():
            assert np.array_equal(p.data, m2.params[name].data)

    def test_single_class_training_set_rejected(self, rng):
        records = [
            ManifestRecord(image=f"i{i}.png", diagnosis="benign", split="train")
            for i in range(8)
        ]
        manifest = DatasetManifest(root=None, records=records)
        images = rng.standard_normal((8, 3, 32, 32)).astype(np.float32)
        labels = np.zeros(8, dtype=np.float32)
        with pytest.raises(ValueError, match="single class"):
            train_classifier(manifest, ClassifierConfig(epochs=1),
                             images_by_split={"train": (images, labels)})


class TestPredictAndFeatures:
    def test_zero_head_scores_half(self, rng):
        model = init_classifier(ClassifierConfig())
        images = rng.standard_normal((5, 3, 32, 32)).astype(np.float32)
        assert np.allclose(predict_scores(model, images), 0.5)

    def test_purity(self, rng):
        model = init_classifier(ClassifierConfig())
        images = rng.standard_normal((3, 3, 32, 32)).astype(np.float32)
        assert np.array_equal(predict_scores(model, images),
                              predict_scores(model, images))

    def test_feature_shape_and_identity(self, rng):
        model = init_classifier(ClassifierConfig())
        images = rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
        feats = extract_features(model, images)
        assert feats.embeddings.shape == (4, 128)
        same = np.stack([images[0], images[0]])
        f2 = extract_features(model, same)
        assert np.array_equal(f2.embeddings[0], f2.embeddings[1])

    def test_features_separate_classes_after_training(self, rng):
        n = 96
        images, labels = _separable_arrays(n, rng)
        manifest = _manifest_from_arrays(n)
        split_at = int(0.8 * n)
        model = train_classifier(
            manifest, ClassifierConfig(epochs=3, batch_size=32, lr=1e-3, seed=1),
            images_by_split={
                "train": (images[:split_at], labels[:split_at]),
                "val": (images[split_at:], labels[split_at:]),
            },
        )
        feats = extract_features(model, images).embeddings
        pos = feats[labels == 1].mean(axis=0)
        neg = feats[labels == 0].mean(axis=0)
        between = np.linalg.norm(pos - neg)
        within = np.mean([
            np.linalg.norm(feats[labels == 1] - pos, axis=1).mean(),
            np.linalg.norm(feats[labels == 0] - neg, axis=1).mean(),
        ])
        assert between > within


class TestSubgroupEvaluation:
    def _manifest_and_data(self, rng, n=24):
        # test split only; alternating labels, alternating tones
        records = [
            ManifestRecord(image=f"i{i}.png",
                           diagnosis="malignant" if i % 2 else "benign",
                           skin_tone="light" if i < n // 2 else "dark",
                           split="test")
            for i in range(n)
        ]
        manifest = DatasetManifest(root=None, records=records)
        images = rng.standard_normal((n, 3, 32, 32)).astype(np.float32)
        labels = np.array([1.0 if i % 2 else 0.0 for i in range(n)], dtype=np.float32)
        return manifest, images, labels

    def test_single_subgroup_equals_overall(self, rng):
        records = [
            ManifestRecord(image=f"i{i}.png",
                           diagnosis="malignant" if i % 2 else "benign",
                           skin_tone="light", split="test")
            for i in range(12)
        ]
        manifest = DatasetManifest(root=None, records=records)
        images = rng.standard_normal((12, 3, 32, 32)).astype(np.float32)
        labels = np.array([i % 2 for i in range(12)], dtype=np.float32)
        model = init_classifier(ClassifierConfig())
        results = evaluate_by_subgroup(model, manifest, ["skin_tone"],
                                       images_and_labels=(images, labels))
        overall, sub = results
        assert sub.subgroup == {"skin_tone": "light"}
        assert sub.support == overall.support
        assert sub.auc == overall.auc
        assert sub.recall == overall.recall

    def test_single_class_subgroup_flagged(self, rng):
        records = (
            [ManifestRecord(image=f"p{i}.png", diagnosis="malignant",
                            skin_tone="dark", split="test") for i in range(4)]
            + [ManifestRecord(image=f"m{i}.png",
                              diagnosis="malignant" if i % 2 else "benign",
                              skin_tone="light", split="test") for i in range(8)]
        )
        manifest = DatasetManifest(root=None, records=records)
        images = rng.standard_normal((12, 3, 32, 32)).astype(np.float32)
        labels = np.array([1] * 4 + [i % 2 for i in range(8)], dtype=np.float32)
        model = init_classifier(ClassifierConfig())
        results = evaluate_by_subgroup(model, manifest, ["skin_tone"],
                                       images_and_labels=(images, labels))
        dark = next(r for r in results if r.subgroup.get("skin_tone") == "dark")
        assert dark.auc is None
        assert "auc_undefined_single_class" in dark.flags
        assert dark.recall is not None  # positives exist, recall computable

    def test_partition_property(self, rng):
        manifest, images, labels = self._manifest_and_data(rng)
        model = init_classifier(ClassifierConfig())
        results = evaluate_by_subgroup(model, manifest, ["skin_tone"],
                                       images_and_labels=(images, labels))
        overall, *subgroups = results
        assert sum(r.support for r in subgroups) == overall.support == len(manifest)

    def test_missing_attribute_rejected(self, rng):
        records = [ManifestRecord(image="a.png", diagnosis="benign", split="test")]
        manifest = DatasetManifest(root=None, records=records)
        model = init_classifier(ClassifierConfig())
        with pytest.raises(ValueError, match="skin_tone"):
            evaluate_by_subgroup(model, manifest, ["skin_tone"],
                                 images_and_labels=(np.zeros((1, 3, 32, 32),
                                                             dtype=np.float32),
                                                    np.zeros(1)))

    def test_empty_split_rejected(self):
        manifest = DatasetManifest(root=None, records=[
            ManifestRecord(image="a.png", diagnosis="benign", split="train")
        ])
        model = init_classifier(ClassifierConfig())
        with pytest.raises(ValueError, match="test"):
            evaluate_by_subgroup(model, manifest, [])
