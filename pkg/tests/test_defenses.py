import numpy as np
import pytest

from advfoolgen import data, generator
from advfoolgen.baselines import GradAttackConfig, fgsm
from advfoolgen.classifier import TrainingConfig, evaluate_topk_accuracy, predict_probs
from advfoolgen.defenses import (RetrainStrategy, TransformSpec, adversarial_training,
                                 apply_transform, bit_depth_reduce, defended_predict,
                                 jpeg_compress, retrain_with_advfool, transform_and_retrain)

FAST_HP = TrainingConfig(epochs=3, batch_size=64, seed=4)


class TestBitDepth:
    def test_one_bit_split(self):
        x = np.array([0.4, 0.6], dtype=np.float32).reshape(1, 1, 1, 2)
        np.testing.assert_array_equal(bit_depth_reduce(x, 1).ravel(), [0.0, 1.0])

    def test_eight_bits_fixes_byte_quantized_input(self, rng):
        raw = rng.integers(0, 256, size=(2, 3, 8, 8)).astype(np.float32) / 255.0
        np.testing.assert_array_equal(bit_depth_reduce(raw, 8), raw)

    @pytest.mark.parametrize("bits", range(1, 9))
    def test_idempotent(self, rng, bits):
        x = rng.random((2, 3, 8, 8), dtype=np.float32)
        once = bit_depth_reduce(x, bits)
        np.testing.assert_array_equal(bit_depth_reduce(once, bits), once)

    @pytest.mark.parametrize("bits", range(1, 9))
    def test_matches_level_oracle_on_all_bytes(self, bits):
        # exhaustive oracle over the 256 canonical 8-bit levels
        levels = 2**bits - 1
        x = (np.arange(256) / 255.0).reshape(1, 1, 16, 16)
        got = bit_depth_reduce(x, bits).ravel()
        exact = np.arange(256) * levels  # value * levels in exact integer arithmetic
        nearest = (2 * exact + 255) // 510  # round-half-up of exact/255
        np.testing.assert_allclose(got, nearest / levels, atol=1e-7)

    @pytest.mark.parametrize("bits", [0, 9, -1])
    def test_bits_domain(self, bits):
        with pytest.raises(ValueError, match="bits"):
            bit_depth_reduce(np.zeros((1, 1, 1, 1)), bits)


class TestJpeg:
    def test_round_trip_shape_and_range(self, tiny_test):
        out = jpeg_compress(tiny_test.images[:4], 75)
        assert out.shape == tiny_test.images[:4].shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_quality_75_is_lossy(self, tiny_test):
        batch = tiny_test.images[:4]
        out = jpeg_compress(batch, 75)
        assert np.abs(out - batch).mean() > 0.0

    def test_deterministic(self, tiny_test):
        batch = tiny_test.images[:3]
        a = jpeg_compress(batch, 75)
        b = jpeg_compress(batch, 75)
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("quality", [0, 101])
    def test_quality_domain(self, quality):
        with pytest.raises(ValueError, match="quality"):
            jpeg_compress(np.zeros((1, 3, 8, 8), dtype=np.float32), quality)


class TestTransformSpec:
    def test_exactly_one_field_set(self):
        with pytest.raises(ValueError):
            TransformSpec("bit_depth", bits=3, quality=75)
        with pytest.raises(ValueError):
            TransformSpec("jpeg")
        assert TransformSpec("bit_depth", bits=3).tag == "bdr3"
        assert TransformSpec("jpeg", quality=75).tag == "jpeg75"

    def test_apply_tags_provenance(self, tiny_test):
        out = apply_transform(tiny_test, TransformSpec("bit_depth", bits=3))
        assert out.provenance == "clean+bdr3"


class TestRetrainStrategies:
    def test_extra_class_head_size(self, tiny_train, tiny_attack_run):
        adv = generator.generate_advfool(tiny_attack_run["checkpoints"][0],
                                         tiny_train, seed=8)
        model = retrain_with_advfool("smallcnn", tiny_train, adv,
                                     RetrainStrategy("extra_class"), FAST_HP)
        assert model.num_classes == 11
        assert model.metadata["extra_class"] == 10

    def test_parallel_classes_label_mapping(self):
        strategy = RetrainStrategy("parallel_classes")
        assert strategy.output_classes(10) == 20
        np.testing.assert_array_equal(
            strategy.map_adv_labels(np.array([2, 9]), 10), [12, 19])

    def test_original_labels_untouched(self):
        strategy = RetrainStrategy("original_labels")
        labels = np.array([3, 1, 4])
        np.testing.assert_array_equal(strategy.map_adv_labels(labels, 10), labels)
        assert strategy.output_classes(10) == 10

    def test_label_mapping_is_bijective_per_strategy(self, rng):
        labels = rng.integers(0, 10, 50)
        parallel = RetrainStrategy("parallel_classes").map_adv_labels(labels, 10)
        assert len(np.unique(parallel)) == len(np.unique(labels))
        np.testing.assert_array_equal(parallel - 10, labels)

    def test_baseline_attack_restricted_to_original_labels(self, tiny_model, tiny_train):
        adv = fgsm(tiny_model, tiny_train.take(np.arange(64)), 0.05)
        with pytest.raises(ValueError, match="original_labels"):
            retrain_with_advfool("smallcnn", tiny_train.take(np.arange(64)), adv,
                                 RetrainStrategy("parallel_classes"), FAST_HP)

    def test_clean_provenance_rejected_as_adv(self, tiny_train):
        with pytest.raises(ValueError, match="provenance"):
            retrain_with_advfool("smallcnn", tiny_train, tiny_train,
                                 RetrainStrategy("extra_class"), FAST_HP)

    def test_unknown_strategy(self):
        with pytest.raises(ValueError, match="strategy"):
            RetrainStrategy("delete_everything")


class TestAdversarialTraining:
    def test_zero_budget_degenerates_to_standard_training(self, tiny_train, tiny_test):
        cfg = GradAttackConfig(epsilon=0.0, steps=3, step_size=None, random_start=False)
        hp = TrainingConfig(epochs=6, batch_size=64, seed=4)
        model = adversarial_training("smallcnn", tiny_train, cfg, hp)
        acc = evaluate_topk_accuracy(model, tiny_test, 1)
        assert acc >= 0.5  # ordinary small-run accuracy

    def test_metadata_records_attack(self, tiny_train):
        cfg = GradAttackConfig(epsilon=0.03, steps=2, step_size=0.02, random_start=True)
        model = adversarial_training("smallcnn", tiny_train.take(np.arange(128)), cfg,
                                     TrainingConfig(epochs=1, batch_size=64, seed=0))
        assert model.metadata["defense"] == "adv_training"
        assert model.metadata["attack"]["epsilon"] == 0.03


class TestTransformAndRetrain:
    def test_composition_contract(self, tiny_train, tiny_attack_run):
        adv = generator.generate_advfool(tiny_attack_run["checkpoints"][0],
                                         tiny_train, seed=9)
        model = transform_and_retrain("smallcnn", tiny_train, adv,
                                      TransformSpec("bit_depth", bits=3),
                                      RetrainStrategy("extra_class"), FAST_HP)
        assert model.num_classes == 11
        assert model.metadata["transform"] == {"kind": "bit_depth", "bits": 3,
                                               "quality": None}

    def test_evaluation_applies_same_transform(self, tiny_train, tiny_test,
                                               tiny_attack_run):
        adv = generator.generate_advfool(tiny_attack_run["checkpoints"][0],
                                         tiny_train, seed=9)
        spec = TransformSpec("bit_depth", bits=3)
        model = transform_and_retrain("smallcnn", tiny_train, adv, spec,
                                      RetrainStrategy("extra_class"), FAST_HP)
        via_helper = defended_predict(model, tiny_test).probs
        manual = predict_probs(model, apply_transform(tiny_test, spec)).probs
        assert (via_helper == manual).all()

    def test_undefended_predict_passthrough(self, tiny_model, tiny_test):
        a = defended_predict(tiny_model, tiny_test).probs
        b = predict_probs(tiny_model, tiny_test).probs
        assert (a == b).all()
