import numpy as np
import pytest
import torch

from advfoolgen import classifier, data
from advfoolgen.classifier import (TrainingConfig, evaluate_topk_accuracy,
                                   least_likely_classes, least_likely_targets,
                                   load_classifier, parameter_fingerprint,
                                   penultimate_features, predict_probs, save_classifier,
                                   train_classifier)


class TestLeastLikely:
    def test_two_smallest(self):
        row = np.array([0.5, 0.3, 0.1, 0.06, 0.04])
        np.testing.assert_array_equal(least_likely_classes(row, 2), [4, 3])

    def test_uniform_tie_break(self):
        row = np.full(10, 0.1)
        np.testing.assert_array_equal(least_likely_classes(row, 2), [0, 1])

    def test_matches_sort_oracle(self, rng):
        for _ in range(200):
            row = rng.random(rng.integers(3, 12))
            k = int(rng.integers(1, row.size))
            # exhaustive oracle: sort (prob, index) pairs lexicographically
            oracle = sorted(range(row.size), key=lambda i: (row[i], i))[:k]
            np.testing.assert_array_equal(least_likely_classes(row, k), oracle)

    @pytest.mark.parametrize("k", [0, 5, 9])
    def test_k_domain(self, k):
        with pytest.raises(ValueError, match="k"):
            least_likely_classes(np.full(5, 0.2), k)

    def test_rowwise_targets_match_single_row(self, rng):
        probs = rng.random((20, 8))
        targets = least_likely_targets(probs, 2)
        for i in range(20):
            np.testing.assert_array_equal(targets[i], least_likely_classes(probs[i], 2))


class TestPredictions:
    def test_rows_are_probability_vectors(self, tiny_model, tiny_test):
        preds = predict_probs(tiny_model, tiny_test)
        assert preds.probs.shape == (len(tiny_test), 10)
        assert (preds.probs >= 0).all()
        np.testing.assert_allclose(preds.probs.sum(axis=1), 1.0, atol=1e-5)

    def test_duplicated_image_identical_rows(self, tiny_model, tiny_test):
        one = tiny_test.images[:1]
        batch = np.concatenate([one, one, one])
        preds = predict_probs(tiny_model, batch)
        assert (preds.probs[0] == preds.probs[1]).all()
        assert (preds.probs[0] == preds.probs[2]).all()

    def test_top_label_is_argmax(self, tiny_model, tiny_test):
        preds = predict_probs(tiny_model, tiny_test)
        np.testing.assert_array_equal(preds.top_labels, np.argmax(preds.probs, axis=1))

    def test_shape_mismatch(self, tiny_model, rng):
        with pytest.raises(ValueError, match="shape"):
            predict_probs(tiny_model, rng.random((2, 3, 16, 16), dtype=np.float32))

    def test_model_parameters_untouched(self, tiny_model, tiny_test):
        before = parameter_fingerprint(tiny_model)
        predict_probs(tiny_model, tiny_test)
        penultimate_features(tiny_model, tiny_test)
        assert parameter_fingerprint(tiny_model) == before


class TestTopkAccuracy:
    def test_full_k_is_one(self, tiny_model, tiny_test):
        assert evaluate_topk_accuracy(tiny_model, tiny_test, 10) == 1.0

    def test_top1_not_above_top5(self, tiny_model, tiny_test):
        top1 = evaluate_topk_accuracy(tiny_model, tiny_test, 1)
        top5 = evaluate_topk_accuracy(tiny_model, tiny_test, 5)
        assert top1 <= top5

    def test_matches_bruteforce_membership(self, tiny_model, tiny_test, rng):
        for k in (1, 3, 5):
            acc = evaluate_topk_accuracy(tiny_model, tiny_test, k)
            preds = predict_probs(tiny_model, tiny_test)
            hits = 0
            for i in range(len(tiny_test)):
                order = sorted(range(10), key=lambda c: (-preds.probs[i, c], c))
                hits += tiny_test.labels[i] in order[:k]
            assert acc == hits / len(tiny_test)

    def test_empty_set_error(self, tiny_model):
        empty = data.LabeledImageSet(np.zeros((0, 3, 32, 32), dtype=np.float32),
                                     np.zeros(0, dtype=np.int64), "clean", 10)
        with pytest.raises(ValueError, match="empty"):
            evaluate_topk_accuracy(tiny_model, empty, 1)


class TestTraining:
    def test_single_class_rejected(self, tiny_train):
        idx = np.flatnonzero(tiny_train.labels == 0)
        with pytest.raises(ValueError, match="cover"):
            train_classifier(tiny_train.take(idx), "smallcnn",
                             TrainingConfig(epochs=1))

    def test_unknown_arch(self, tiny_train):
        with pytest.raises(ValueError, match="architecture"):
            train_classifier(tiny_train, "resnet152", TrainingConfig(epochs=1))

    def test_metadata_records_accuracy(self, tiny_model):
        assert 0.0 <= tiny_model.metadata["train_accuracy"] <= 1.0
        assert 0.0 <= tiny_model.metadata["test_accuracy"] <= 1.0

    def test_same_seed_same_parameters(self, tiny_train):
        hp = TrainingConfig(epochs=1, batch_size=64, seed=5)
        a = train_classifier(tiny_train, "smallcnn", hp)
        b = train_classifier(tiny_train, "smallcnn", hp)
        assert parameter_fingerprint(a) == parameter_fingerprint(b)


class TestPenultimateFeatures:
    def test_shape_and_determinism(self, tiny_model, tiny_test):
        feats = penultimate_features(tiny_model, tiny_test)
        assert feats.shape == (len(tiny_test), 256)
        again = penultimate_features(tiny_model, tiny_test)
        assert (feats == again).all()

    def test_linear_probe_recovers_accuracy(self, tiny_model, tiny_train, tiny_test):
        # a probe trained on the features should reach >= 90% of the full model's
        # accuracy, confirming the layer really is the penultimate one
        train_feats = torch.from_numpy(penultimate_features(tiny_model, tiny_train))
        test_feats = torch.from_numpy(penultimate_features(tiny_model, tiny_test))
        y_train = torch.from_numpy(tiny_train.labels.copy())
        torch.manual_seed(0)
        probe = torch.nn.Linear(train_feats.shape[1], 10)
        opt = torch.optim.Adam(probe.parameters(), lr=1e-2)
        for _ in range(300):
            opt.zero_grad()
            loss = torch.nn.functional.cross_entropy(probe(train_feats), y_train)
            loss.backward()
            opt.step()
        with torch.no_grad():
            probe_acc = (probe(test_feats).argmax(1).numpy() == tiny_test.labels).mean()
        full_acc = evaluate_topk_accuracy(tiny_model, tiny_test, 1)
        assert probe_acc >= 0.9 * full_acc


class TestCheckpointIO:
    def test_round_trip_preserves_predictions(self, tiny_model, tiny_test, tmp_path):
        path = tmp_path / "clf.pt"
        save_classifier(tiny_model, path)
        loaded = load_classifier(path)
        a = predict_probs(tiny_model, tiny_test).probs
        b = predict_probs(loaded, tiny_test).probs
        assert (a == b).all()
        assert loaded.metadata == tiny_model.metadata

    def test_rejects_wrong_container(self, tmp_path):
        path = tmp_path / "other.pt"
        torch.save({"kind": "something-else"}, path)
        with pytest.raises(ValueError, match="classifier checkpoint"):
            load_classifier(path)
