import sys
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from gradual_cam.attribution import (  # noqa: E402
    AttributionRequest,
    SaliencyMap,
    contrastive_ebp,
    default_target_layer,
    excitation_backprop,
    grad_cam,
    present_baseline,
)
from gradual_cam.autonet import (  # noqa: E402
    Conv,
    Flatten,
    Linear,
    Model,
    ReLU,
    forward,
    forward_from,
    init_model,
)
from gradual_cam.errors import InvalidArgumentError  # noqa: E402


def linear_model(weight, input_shape=(1, 1, 2)) -> Model:
    weight = np.asarray(weight, dtype=np.float64)
    layers = (Flatten(), Linear(weight.shape[1], weight.shape[0]))
    return Model("toy", input_shape, layers, (None, weight), (None, np.zeros(weight.shape[0])))


def request(model: Model, image, class_idx: int, target: int) -> AttributionRequest:
    _, tape = forward(model, np.asarray(image, dtype=np.float64))
    return AttributionRequest(model, tape, class_idx, target)


def positive_pair(seed: int):
    """Model and strictly positive image whose class-0 evidence keeps every parent alive."""
    model = init_model("net-a", seed)
    weights, biases = list(model.weights), list(model.biases)
    top = weights[-1].copy()
    top[0] = np.abs(top[0]) + 1e-3
    weights[-1] = top
    biases = [None if b is None else np.zeros_like(b) for b in biases]
    weights[0] = np.abs(weights[0])
    model = model.with_params(weights, biases)
    image = 0.1 + np.random.default_rng(seed).random((1, 32, 32))
    return model, image


class GradCamTests(unittest.TestCase):
    def test_zero_gradient_gives_zero_map(self) -> None:
        model = init_model("net-a", 0)
        weights = list(model.weights)
        weights[-1] = np.zeros_like(weights[-1])
        model = model.with_params(weights, model.biases)
        req = request(model, np.random.default_rng(0).random((1, 32, 32)), 0, 8)
        np.testing.assert_array_equal(grad_cam(req).map, np.zeros((8, 8)))

    def test_single_channel_uniform_gradient(self) -> None:
        layers = (Conv(1, 1), ReLU(), Flatten(), Linear(4, 2))
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        top = np.array([[0.5, 0.5, 0.5, 0.5], [1.0, -1.0, 2.0, 0.0]])
        model = Model("toy", (1, 2, 2), layers, (kernel, None, None, top),
                      (np.zeros(1), None, None, np.zeros(2)))
        image = np.array([[[0.2, 0.4], [0.6, 0.8]]])
        result = grad_cam(request(model, image, 0, 2))
        np.testing.assert_allclose(result.map, 0.5 * image[0], atol=1e-15)
        self.assertEqual(result.method, "gradcam")

    def test_matches_finite_difference_oracle(self) -> None:
        # positive conv weights keep every activation above zero, so pooling has no ties
        model = init_model("net-a", 0)
        weights = [w if w is None or w.ndim == 2 else np.abs(w) for w in model.weights]
        model = model.with_params(weights, model.biases)
        image = np.random.default_rng(1).random((1, 32, 32))
        _, tape = forward(model, image)
        target, class_idx = default_target_layer(model), 1
        activation = tape[target]
        eps = 1e-5
        gradient = np.zeros_like(activation)
        for pos in np.ndindex(activation.shape):
            plus, minus = activation.copy(), activation.copy()
            plus[pos] += eps
            minus[pos] -= eps
            gradient[pos] = (
                forward_from(model, plus, target)[class_idx]
                - forward_from(model, minus, target)[class_idx]
            ) / (2 * eps)
        alpha = gradient.mean(axis=(1, 2))
        oracle = np.maximum(sum(a * plane for a, plane in zip(alpha, activation)), 0.0)
        result = grad_cam(AttributionRequest(model, tape, class_idx, target))
        self.assertLess(np.abs(result.map - oracle).max(), 1e-4)

    def test_scaling_top_layer_scales_map(self) -> None:
        model = init_model("net-a", 2)
        image = np.random.default_rng(2).random((1, 32, 32))
        _, tape = forward(model, image)
        weights = list(model.weights)
        weights[-1] = weights[-1] * 4.0
        scaled = model.with_params(weights, model.biases)
        base = grad_cam(AttributionRequest(model, tape, 0, 8)).map
        bigger = grad_cam(AttributionRequest(scaled, tape, 0, 8)).map
        np.testing.assert_allclose(bigger, 4.0 * base, rtol=1e-12, atol=1e-15)

    def test_target_after_flatten_rejected(self) -> None:
        model = init_model("net-a", 0)
        with self.assertRaises(InvalidArgumentError):
            grad_cam(request(model, np.zeros((1, 32, 32)), 0, 10))

    def test_default_target_is_last_spatial_relu(self) -> None:
        self.assertEqual(default_target_layer(init_model("net-a", 0)), 8)
        self.assertEqual(default_target_layer(init_model("net-b", 0)), 11)


class ExcitationTests(unittest.TestCase):
    def test_symmetric_split(self) -> None:
        model = linear_model([[1.0, 1.0], [0.0, 0.0]])
        result = excitation_backprop(request(model, [[[1.0, 1.0]]], 0, 0))
        np.testing.assert_allclose(result.map, [[0.5, 0.5]], atol=1e-15)

    def test_weighted_split(self) -> None:
        model = linear_model([[2.0, 1.0], [0.0, 0.0]])
        result = excitation_backprop(request(model, [[[1.0, 1.0]]], 0, 0))
        np.testing.assert_allclose(result.map, [[2 / 3, 1 / 3]], atol=1e-15)

    def test_negative_weights_ignored(self) -> None:
        model = linear_model([[1.0, -3.0], [0.0, 0.0]])
        result = excitation_backprop(request(model, [[[1.0, 1.0]]], 0, 0))
        np.testing.assert_array_equal(result.map, [[1.0, 0.0]])

    def test_dead_parent_absorbs_mass(self) -> None:
        model = linear_model([[-1.0, -1.0], [1.0, 0.0]])
        result = excitation_backprop(request(model, [[[1.0, 1.0]]], 0, 0))
        np.testing.assert_array_equal(result.map, np.zeros((1, 2)))

    def test_negative_input_rejected(self) -> None:
        model = linear_model([[1.0, 1.0], [0.0, 0.0]])
        with self.assertRaises(InvalidArgumentError):
            excitation_backprop(request(model, [[[1.0, -1.0]]], 0, 0))

    def test_conservation_on_seeded_pairs(self) -> None:
        for seed in range(50):
            model, image = positive_pair(seed)
            req = request(model, image, 0, default_target_layer(model))
            result = excitation_backprop(req)
            self.assertTrue(np.all(result.map >= 0))
            self.assertAlmostEqual(float(result.map.sum()), 1.0, delta=1e-9, msg=f"seed {seed}")

    def test_conservation_down_to_input(self) -> None:
        model, image = positive_pair(3)
        result = excitation_backprop(request(model, image, 0, 0))
        self.assertEqual(result.map.shape, (32, 32))
        self.assertAlmostEqual(float(result.map.sum()), 1.0, delta=1e-9)


class ContrastiveTests(unittest.TestCase):
    def test_self_cancellation(self) -> None:
        layers = (Flatten(), Linear(2, 2), ReLU(), Linear(2, 2))
        hidden = np.array([[1.0, 1.0], [1.0, 1.0]])
        top = np.array([[1.0, -1.0], [0.0, 0.0]])
        model = Model("toy", (1, 1, 2), layers, (None, hidden, None, top),
                      (None, np.zeros(2), None, np.zeros(2)))
        result = contrastive_ebp(request(model, [[[1.0, 2.0]]], 0, 0))
        np.testing.assert_array_equal(result.map, np.zeros((1, 2)))

    def test_one_sided_equals_plain_ebp(self) -> None:
        model, image = positive_pair(4)
        weights = list(model.weights)
        top = weights[-1].copy()
        top[1:] = -np.abs(top[1:]) - 1e-3
        weights[-1] = top
        model = model.with_params(weights, model.biases)
        req = request(model, image, 0, 8)
        np.testing.assert_allclose(contrastive_ebp(req).map, excitation_backprop(req).map,
                                   atol=1e-15)

    def test_two_layer_hand_fixture(self) -> None:
        # input a = [1, 2]; hidden h = relu(W1 a) = [3, 2]; class 0 row [1, 2]
        layers = (Flatten(), Linear(2, 2), ReLU(), Linear(2, 2))
        hidden = np.array([[1.0, 1.0], [0.0, 1.0]])
        top = np.array([[1.0, 2.0], [-1.0, 1.0]])
        model = Model("toy", (1, 1, 2), layers, (None, hidden, None, top),
                      (None, np.zeros(2), None, np.zeros(2)))
        req = request(model, [[[1.0, 2.0]]], 0, 0)
        # positive pass: hidden mass [3/7, 4/7]; input [1/7, 2/7 + 4/7]
        positive = np.array([[1 / 7, 6 / 7]])
        # negated top: class 0 row [-1, -2] has no positive weight, all mass absorbed
        np.testing.assert_allclose(excitation_backprop(req).map, positive, atol=1e-15)
        np.testing.assert_allclose(contrastive_ebp(req).map, positive, atol=1e-15)
        # class 1 positive pass: hidden mass [0, 1] -> input [0, 1]
        # negated row [1, -1]: hidden mass [1, 0] -> input [1/3, 2/3]
        req_one = request(model, [[[1.0, 2.0]]], 1, 0)
        np.testing.assert_allclose(excitation_backprop(req_one).map, [[0.0, 1.0]], atol=1e-15)
        np.testing.assert_allclose(contrastive_ebp(req_one).map, [[0.0, 1 / 3]], atol=1e-15)


class PresentBaselineTests(unittest.TestCase):
    def test_same_size_only_normalizes(self) -> None:
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = present_baseline(SaliencyMap(m, 0, "gradcam"), 2, 2)
        np.testing.assert_array_equal(out, m / 4.0)

    def test_constant_map(self) -> None:
        out = present_baseline(SaliencyMap(np.full((4, 4), 0.3), 0, "ebp"), 32, 32)
        np.testing.assert_allclose(out, np.ones((32, 32)), atol=1e-15)

    def test_ramp_corner(self) -> None:
        ramp = np.add.outer(np.arange(4.0), np.arange(4.0))
        out = present_baseline(SaliencyMap(ramp, 0, "gradcam"), 32, 32)
        self.assertEqual(out.shape, (32, 32))
        self.assertEqual(out[31, 31], 1.0)
        self.assertEqual(out.max(), 1.0)
        self.assertEqual(out[0, 0], 0.0)


if __name__ == "__main__":
    unittest.main()
