"""Tests for the toy segmentation model, its training loop and dataset."""

import math

import numpy as np
import pytest

from patchlock import toymodel
from patchlock.core import ShapeError, TrainingError, UndefinedLossError
from patchlock.segmetrics import IGNORE_LABEL
from patchlock.toymodel import (
    CLASS_COLOURS,
    SGDMomentum,
    TrainConfig,
    forward,
    forward_batch,
    gelu,
    gen_dataset,
    init_model,
    load_checkpoint,
    load_dataset,
    loss_and_grads,
    poly_lr,
    predict,
    save_checkpoint,
    save_dataset,
    split_dataset,
    train,
)

TINY = dict(patch_size=2, embed_dim=8, hidden=8, num_classes=3)


@pytest.fixture
def tiny_model(rng):
    """Small model with random nonzero biases, under 5k parameters."""
    model = init_model((4, 4, 3), seed=1, **TINY)
    model.head_b1[:] = rng.standard_normal(model.head_b1.shape) * 0.1
    model.head_b2[:] = rng.standard_normal(model.head_b2.shape) * 0.1
    return model


def scalar_forward(model, x):
    p, c = model.patch_size, model.num_classes
    h, w, _ = x.shape
    out = np.zeros((h, w, c))
    e, e_pos = model.embed.E, model.embed.E_pos
    index = 0
    for bi in range(h // p):
        for bj in range(w // p):
            flat = [x[bi * p + r, bj * p + col, ch]
                    for r in range(p) for col in range(p) for ch in range(x.shape[2])]
            z0 = [sum(flat[k] * e[k, d] for k in range(len(flat))) + e_pos[index, d]
                  for d in range(e.shape[1])]
            hidden = []
            for j in range(model.hidden):
                a = sum(z0[d] * model.head_w1[d, j] for d in range(len(z0))) + model.head_b1[j]
                hidden.append(0.5 * a * (1.0 + math.erf(a / math.sqrt(2.0))))
            for k in range(p * p * c):
                value = sum(hidden[j] * model.head_w2[j, k] for j in range(len(hidden)))
                pixel, cls = divmod(k, c)
                r, col = divmod(pixel, p)
                out[bi * p + r, bj * p + col, cls] = value + model.head_b2[k]
            index += 1
    return out


class TestForward:
    """Test cases for the forward pass."""

    def test_matches_scalar_loop(self, rng, tiny_model):
        """Test logits against an explicit loop."""
        x = rng.random((4, 4, 3))
        np.testing.assert_allclose(forward(tiny_model, x), scalar_forward(tiny_model, x),
                                   atol=1e-10)

    def test_batch_matches_single(self, rng, tiny_model):
        """Test that batched logits equal per-image logits."""
        images = [rng.random((4, 4, 3)) for _ in range(3)]
        batch = forward_batch(tiny_model, images)
        assert batch.shape == (3, 4, 4, 3)
        for x, logits in zip(images, batch):
            np.testing.assert_allclose(logits, forward(tiny_model, x), atol=1e-12)

    def test_zero_model(self, rng):
        """Test that an all-zero model gives zero logits and class 0."""
        model = init_model((4, 4, 3), **TINY)
        for value in model.parameters().values():
            value[...] = 0.0
        x = rng.random((4, 4, 3))
        np.testing.assert_array_equal(forward(model, x), np.zeros((4, 4, 3)))
        np.testing.assert_array_equal(predict(model, x), np.zeros((4, 4), dtype=int))

    def test_last_layer_is_linear(self, rng):
        """Test that doubling the output weights doubles the logits exactly."""
        model = init_model((4, 4, 3), seed=2, **TINY)
        doubled = model.copy()
        doubled.head_w2 *= 2.0
        x = rng.random((4, 4, 3))
        np.testing.assert_array_equal(forward(doubled, x), 2.0 * forward(model, x))

    def test_wrong_image_size(self, rng, tiny_model):
        """Test that an image of another size is refused."""
        with pytest.raises(ShapeError):
            forward_batch(tiny_model, [rng.random((8, 4, 3))])

    def test_gelu_reference_values(self):
        """Test gelu(0) = 0 and gelu(x) ~ x for large x."""
        np.testing.assert_allclose(gelu(np.array([0.0, 10.0, -10.0])), [0.0, 10.0, 0.0],
                                   atol=1e-12)


class TestLossAndGrads:
    """Test cases for the loss and its gradients."""

    def test_uniform_logits(self, rng):
        """Test that zero logits give ln C."""
        model = init_model((4, 4, 3), **TINY)
        for value in model.parameters().values():
            value[...] = 0.0
        labels = rng.integers(0, 3, (2, 4, 4))
        loss, _ = loss_and_grads(model, [rng.random((4, 4, 3))] * 2, labels)
        assert loss == pytest.approx(math.log(3.0), abs=1e-12)

    def test_saturated_correct_logits(self, rng):
        """Test a near-zero loss when the right class wins by a wide margin."""
        model = init_model((4, 4, 3), **TINY)
        model.head_w2[...] = 0.0
        model.head_b2[...] = 0.0
        model.head_b2[2::3] = 20.0
        labels = np.full((1, 4, 4), 2)
        loss, _ = loss_and_grads(model, [rng.random((4, 4, 3))], labels)
        assert loss < 1e-3

    def test_all_ignored(self, rng, tiny_model):
        """Test that a batch with no labelled pixel is refused."""
        labels = np.full((1, 4, 4), IGNORE_LABEL)
        with pytest.raises(UndefinedLossError):
            loss_and_grads(tiny_model, [rng.random((4, 4, 3))], labels)

    def test_label_shape_mismatch(self, rng, tiny_model):
        """Test that labels must match the images."""
        with pytest.raises(ShapeError):
            loss_and_grads(tiny_model, [rng.random((4, 4, 3))], np.zeros((1, 2, 2)))

    def test_gradients_match_finite_differences(self, rng, tiny_model):
        """Test every analytic gradient entry against central differences."""
        assert tiny_model.parameter_count() <= 5000
        images = [rng.random((4, 4, 3)) for _ in range(2)]
        labels = rng.integers(0, 3, (2, 4, 4))
        labels[0, 0, :2] = IGNORE_LABEL
        _, grads = loss_and_grads(tiny_model, images, labels)

        step = 1e-5
        for name, param in tiny_model.parameters().items():
            numeric = np.zeros_like(param)
            for i in range(param.size):
                original = param.flat[i]
                param.flat[i] = original + step
                plus, _ = loss_and_grads(tiny_model, images, labels)
                param.flat[i] = original - step
                minus, _ = loss_and_grads(tiny_model, images, labels)
                param.flat[i] = original
                numeric.flat[i] = (plus - minus) / (2 * step)
            analytic = grads[name]
            rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-5)
            assert rel.max() <= 1e-4, name


class TestOptimizer:
    """Test cases for the learning-rate schedule and SGD with momentum."""

    def test_poly_lr_endpoints(self):
        """Test the schedule at the first and halfway iterations."""
        assert poly_lr(0, 100, 0.1, 0.9) == pytest.approx(0.1)
        assert poly_lr(50, 100, 0.1, 1.0) == pytest.approx(0.05)
        assert poly_lr(99, 100, 0.1, 0.9) > 0.0

    def test_momentum_steps(self):
        """Test two hand-computed momentum updates."""
        w = np.array([1.0, -2.0])
        opt = SGDMomentum({"w": w}, momentum=0.5)
        g = np.array([1.0, 2.0])
        opt.step({"w": g}, lr=0.1)
        np.testing.assert_allclose(w, [0.9, -2.2])
        opt.step({"w": g}, lr=0.1)
        np.testing.assert_allclose(w, [0.75, -2.5])

    def test_weight_decay(self):
        """Test that decay adds lambda * w to the gradient."""
        w = np.array([2.0])
        SGDMomentum({"w": w}, momentum=0.0, weight_decay=0.5).step({"w": np.zeros(1)}, lr=0.1)
        np.testing.assert_allclose(w, [1.9])


class TestTrain:
    """Test cases for the training loop."""

    @pytest.fixture
    def small_data(self):
        return gen_dataset(seed=3, n=8)

    @staticmethod
    def small_config(**overrides):
        values = dict(iterations=5, batch_size=4, embed_dim=8, hidden=8, log_every=0)
        values.update(overrides)
        return TrainConfig(**values)

    def test_deterministic(self, small_data):
        """Test that equal seeds give bit-identical models."""
        a = train(self.small_config(), small_data)
        b = train(self.small_config(), small_data)
        for name, value in a.parameters().items():
            np.testing.assert_array_equal(value, b.parameters()[name])

    def test_tiny_lr_stays_at_init(self, small_data):
        """Test that one step with a tiny rate leaves the initialisation."""
        cfg = self.small_config(iterations=1, lr0=1e-12, seed=4)
        trained = train(cfg, small_data)
        start = init_model((32, 32, 3), 4, 8, 8, 4, seed=4)
        for name, value in trained.parameters().items():
            np.testing.assert_allclose(value, start.parameters()[name], atol=1e-6)

    def test_given_model_not_modified(self, small_data):
        """Test that a starting model is copied."""
        start = init_model((32, 32, 3), 4, 8, 8, 4)
        before = start.copy()
        train(self.small_config(), small_data, start)
        np.testing.assert_array_equal(start.head_w1, before.head_w1)
        np.testing.assert_array_equal(start.embed.E, before.embed.E)

    def test_non_finite_loss(self, small_data, monkeypatch):
        """Test that divergence stops training with the iteration."""
        monkeypatch.setattr(toymodel, "loss_and_grads", lambda *a: (float("nan"), {}))
        with pytest.raises(TrainingError) as exc:
            train(self.small_config(), small_data)
        assert exc.value.iteration == 0

    @pytest.mark.parametrize(
        "field,value", [("lr0", 0.0), ("iterations", 0), ("batch_size", 0)]
    )
    def test_config_validation(self, field, value):
        """Test that degenerate recipes are refused."""
        with pytest.raises(ValueError):
            TrainConfig(**{field: value})

    def test_empty_data(self):
        """Test that training needs data."""
        with pytest.raises(ValueError):
            train(self.small_config(), [])


class TestDataset:
    """Test cases for the synthetic dataset."""

    def test_deterministic(self):
        """Test that a seed reproduces the samples."""
        a = gen_dataset(5, 3)
        b = gen_dataset(5, 3)
        for s, t in zip(a, b):
            np.testing.assert_array_equal(s.image, t.image)
            np.testing.assert_array_equal(s.labels, t.labels)

    def test_index_addressing(self):
        """Test that sample i depends only on (seed, i)."""
        whole = gen_dataset(5, 5)
        tail = gen_dataset(5, 3, start=2)
        np.testing.assert_array_equal(whole[2].image, tail[0].image)

    def test_split_is_disjoint(self):
        """Test that train and test samples differ."""
        train_set, test_set = split_dataset(6, 4, 4)
        for s in train_set:
            for t in test_set:
                assert not np.array_equal(s.image, t.image)

    def test_properties(self):
        """Test shapes, value range, background majority and class colours."""
        for sample in gen_dataset(7, 100):
            assert sample.image.shape == (32, 32, 3)
            assert sample.labels.shape == (32, 32)
            assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0
            assert np.mean(sample.labels == 0) > 0.5
            assert set(np.unique(sample.labels)) <= {0, 1, 2, 3}
            assert len(np.unique(sample.labels)) >= 2
            for k in range(1, 4):
                pixels = sample.image[sample.labels == k]
                if pixels.size:
                    assert np.abs(pixels - CLASS_COLOURS[k - 1]).max() < 0.2

    def test_empty(self):
        """Test that n = 0 is refused."""
        with pytest.raises(ValueError):
            gen_dataset(0, 0)


class TestFiles:
    """Test cases for checkpoints and cached datasets."""

    def test_checkpoint_round_trip(self, tmp_path, rng):
        """Test that a checkpoint reproduces the model."""
        model = init_model((8, 8, 3), 4, 8, 8, 4, seed=9)
        path = str(tmp_path / "model.plw")
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        for name, value in model.parameters().items():
            np.testing.assert_array_equal(loaded.parameters()[name], value)
        x = rng.random((8, 8, 3))
        np.testing.assert_array_equal(forward(loaded, x), forward(model, x))

    def test_dataset_round_trip(self, tmp_path):
        """Test that cached samples load back unchanged."""
        samples = gen_dataset(8, 3)
        save_dataset(samples, str(tmp_path / "data"))
        loaded = load_dataset(str(tmp_path / "data"))
        assert len(loaded) == 3
        for s, t in zip(samples, loaded):
            np.testing.assert_array_equal(s.image, t.image)
            np.testing.assert_array_equal(s.labels, t.labels)

    def test_missing_dataset(self, tmp_path):
        """Test that an empty directory is refused."""
        with pytest.raises(FileNotFoundError):
            load_dataset(str(tmp_path))
