import numpy as np
import pytest

from ledsense.errors import DimensionError, ValidationError
from ledsense.nn import (
    Adam,
    AdamState,
    DigitalModel,
    Tensor,
    adam_step,
    backward,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    softmax,
)


def zeroed_model(sensor_n=16, dtype=np.float64) -> DigitalModel:
    model = init_params(0, sensor_n=sensor_n, dtype=dtype)
    for t in model.params().values():
        t.data[:] = 0
    return model


class TestForward:
    def test_zero_weights_give_even_split(self):
        model = zeroed_model()
        p = forward(model, np.zeros((16, 16)))
        np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-12)

    def test_fc2_bias_softmax(self, rng):
        model = zeroed_model()
        model.fc2.b.data[:] = [10.0, -10.0]
        p = forward(model, rng.standard_normal((16, 16)))
        # softmax of (10, -10): p1 = exp(-20) / (1 + exp(-20))
        expected_p1 = np.exp(-20.0) / (1.0 + np.exp(-20.0))
        assert p[0] == pytest.approx(1.0 - expected_p1, abs=1e-12)
        assert p[1] == pytest.approx(expected_p1, rel=1e-9)

    def test_deterministic(self, rng):
        img = rng.standard_normal((16, 16))
        p1 = forward(init_params(7, sensor_n=16), img)
        p2 = forward(init_params(7, sensor_n=16), img)
        np.testing.assert_array_equal(p1, p2)

    def test_wrong_dims_rejected(self):
        model = init_params(0, sensor_n=16)
        with pytest.raises(DimensionError):
            forward(model, np.zeros((8, 8)))

    def test_softmax_sums_to_one(self, rng):
        logits = rng.standard_normal((500, 2)) * rng.uniform(1, 50)
        p = softmax(logits)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_probabilities_in_unit_interval(self, rng):
        model = init_params(3, sensor_n=16)
        p = model.forward_batch(rng.standard_normal((8, 16, 16)))
        assert np.all(p > 0) and np.all(p < 1)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


class TestBackward:
    def test_even_prediction_loss_is_ln2(self):
        model = zeroed_model()
        loss, _ = backward(model, np.zeros((16, 16)), 0)
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)

    def test_bad_label(self):
        model = zeroed_model()
        with pytest.raises(ValidationError):
            backward(model, np.zeros((16, 16)), 2)

    def test_input_grad_matches_fd(self, rng):
        model = init_params(1, sensor_n=16, dtype=np.float64)
        img = rng.standard_normal((16, 16))
        label = 1
        _, grad = backward(model, img, label)
        eps = 1e-6
        coords = [(2, 3), (7, 11), (0, 0), (15, 15), (9, 4)]
        for r, c in coords:
            up = img.copy()
            up[r, c] += eps
            down = img.copy()
            down[r, c] -= eps
            lp, _ = backward(model, up, label)
            lm, _ = backward(model, down, label)
            fd = (lp - lm) / (2 * eps)
            assert abs(fd - grad[r, c]) / max(abs(fd), 1e-12) < 1e-4

    def test_param_grads_match_fd(self, rng):
        model = init_params(2, sensor_n=16, dtype=np.float64)
        img = rng.standard_normal((16, 16))
        label = 0
        model.zero_grad()
        backward(model, img, label)
        grads = {k: t.grad.copy() for k, t in model.params().items()}
        names = list(model.params())
        eps = 1e-6
        checked = 0
        rng2 = np.random.default_rng(0)
        while checked < 10:
            name = names[rng2.integers(len(names))]
            t = model.params()[name]
            i = int(rng2.integers(t.data.size))
            orig = t.data.flat[i]
            t.data.flat[i] = orig + eps
            lp, _ = backward(model, img, label)
            t.data.flat[i] = orig - eps
            lm, _ = backward(model, img, label)
            t.data.flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            if abs(fd) < 1e-9:  # dead ReLU path; derivative uninformative
                continue
            assert abs(fd - grads[name].flat[i]) / max(abs(fd), 1e-12) < 1e-4
            checked += 1


class TestMaxPool:
    def test_ties_route_to_first_index(self):
        from ledsense.nn import _MaxPool2

        pool = _MaxPool2()
        x = np.ones((1, 1, 2, 2))
        out = pool.forward(x)
        np.testing.assert_array_equal(out, [[[[1.0]]]])
        dx = pool.backward(np.array([[[[5.0]]]]))
        expected = np.zeros((1, 1, 2, 2))
        expected[0, 0, 0, 0] = 5.0  # all equal: gradient goes to block index 0
        np.testing.assert_array_equal(dx, expected)

    def test_gradient_routes_to_argmax(self):
        from ledsense.nn import _MaxPool2

        pool = _MaxPool2()
        x = np.zeros((1, 1, 2, 2))
        x[0, 0, 1, 0] = 2.0
        pool.forward(x)
        dx = pool.backward(np.array([[[[3.0]]]]))
        expected = np.zeros((1, 1, 2, 2))
        expected[0, 0, 1, 0] = 3.0
        np.testing.assert_array_equal(dx, expected)


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = np.array([1.5, -0.5])
        adam_step([p], [np.zeros(2)], AdamState(), lr=0.1)
        np.testing.assert_array_equal(p, [1.5, -0.5])

    def test_first_step_magnitude(self):
        # bias-corrected first step moves by ~lr * sign(grad)
        p = np.array([0.0])
        adam_step([p], [np.array([1.0])], AdamState(), lr=0.1)
        assert p[0] == pytest.approx(-0.1, rel=1e-6)

    def test_deterministic_trajectory(self, rng):
        g = [rng.standard_normal(4) for _ in range(20)]

        def run():
            p = np.zeros(4)
            st = AdamState()
            for gi in g:
                adam_step([p], [gi], st, lr=0.01)
            return p

        np.testing.assert_array_equal(run(), run())

    def test_bad_lr(self):
        with pytest.raises(ValidationError):
            adam_step([np.zeros(2)], [np.zeros(2)], AdamState(), lr=0.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step([np.zeros(2)], [np.zeros(3)], AdamState(), lr=0.1)


class TestInit:
    def test_same_seed_identical(self):
        a = init_params(5, sensor_n=16).state_arrays()
        b = init_params(5, sensor_n=16).state_arrays()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_different_seeds_differ(self):
        a = init_params(5, sensor_n=16).state_arrays()
        b = init_params(6, sensor_n=16).state_arrays()
        assert any(np.any(a[k] != b[k]) for k in a)

    def test_he_uniform_bounds(self):
        model = init_params(0, sensor_n=64)
        checks = {
            "conv1.w": 1 * 9,
            "conv2.w": 6 * 9,
            "fc1.w": (64 // 4) ** 2 * 6,
            "fc2.w": 64,
        }
        for name, fan_in in checks.items():
            bound = np.sqrt(6.0 / fan_in)
            w = model.params()[name].data
            assert np.abs(w).max() <= bound
            assert np.abs(w).max() > 0.5 * bound  # actually fills the range
        assert np.all(model.params()["conv1.b"].data == 0)


class TestToyTraining:
    def test_linearly_separable_20_samples(self):
        # class by sign of the mean of the left half minus the right half
        rng = np.random.default_rng(0)
        n = 20
        images = rng.standard_normal((n, 16, 16)) * 0.1
        labels = np.arange(n) % 2
        images[labels == 0, :, :8] += 1.0
        images[labels == 1, :, 8:] += 1.0
        model = init_params(0, sensor_n=16)
        opt = Adam(model.params(), lr=1e-3)
        for epoch in range(200):
            model.zero_grad()
            model.backward_batch(images, labels)
            opt.step()
            preds = model.forward_batch(images).argmax(axis=1)
            if np.array_equal(preds, labels):
                break
        preds = model.forward_batch(images).argmax(axis=1)
        assert np.array_equal(preds, labels)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        model = init_params(11, sensor_n=16)
        save_checkpoint(model, tmp_path / "ckpt")
        loaded = load_checkpoint(tmp_path / "ckpt")
        img = rng.standard_normal((16, 16))
        np.testing.assert_array_equal(forward(model, img), forward(loaded, img))

    def test_version_field_mandatory(self, tmp_path):
        model = init_params(0, sensor_n=16)
        save_checkpoint(model, tmp_path / "ckpt")
        manifest = (tmp_path / "ckpt" / "checkpoint.json").read_text()
        assert '"version"' in manifest
        bad = manifest.replace('"version": 1', '"version": 99')
        (tmp_path / "ckpt" / "checkpoint.json").write_text(bad)
        with pytest.raises(ValidationError):
            load_checkpoint(tmp_path / "ckpt")

    def test_truncated_blob_rejected(self, tmp_path):
        model = init_params(0, sensor_n=16)
        save_checkpoint(model, tmp_path / "ckpt")
        blob = tmp_path / "ckpt" / "conv1.w.f32"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(ValidationError):
            load_checkpoint(tmp_path / "ckpt")


class TestTensor:
    def test_accumulate(self):
        t = Tensor(np.zeros(3))
        t.accumulate(np.ones(3))
        t.accumulate(np.ones(3))
        np.testing.assert_array_equal(t.grad, [2.0, 2.0, 2.0])

    def test_accumulate_shape_mismatch(self):
        t = Tensor(np.zeros(3))
        with pytest.raises(DimensionError):
            t.accumulate(np.ones(4))
