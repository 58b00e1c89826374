from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from .autonet import (
    ActivationTape,
    Conv,
    Flatten,
    Linear,
    MaxPool,
    Model,
    ReLU,
    backward_to_layer,
    conv_backward_input,
    conv_forward,
    unpool,
)
from .errors import InvalidArgumentError
from .tensor import normalize_max, upsample_bilinear


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    map: np.ndarray
    target_layer: int
    method: str


@dataclass(frozen=True, eq=False)
class AttributionRequest:
    model: Model
    tape: ActivationTape
    class_idx: int
    target_layer: int

    def validate(self) -> None:
        if len(self.tape) != len(self.model.layers) + 1:
            raise InvalidArgumentError("tape does not belong to this model")
        if not 0 <= self.class_idx < self.model.num_classes:
            raise InvalidArgumentError(
                f"class index {self.class_idx} outside 0..{self.model.num_classes - 1}"
            )
        if not 0 <= self.target_layer < len(self.tape):
            raise InvalidArgumentError(f"target layer {self.target_layer} outside the tape")
        if self.tape[self.target_layer].ndim != 3:
            raise InvalidArgumentError(
                f"target layer {self.target_layer} is not a spatial CxHxW activation"
            )


def default_target_layer(model: Model) -> int:
    """Tape index of the last post-ReLU activation that is still spatial."""
    best: Optional[int] = None
    for index, layer in enumerate(model.layers):
        if isinstance(layer, ReLU) and len(model.shapes[index + 1]) == 3:
            best = index + 1
    if best is None:
        raise InvalidArgumentError(f"model '{model.name}' has no spatial ReLU activation")
    return best


def grad_cam(req: AttributionRequest) -> SaliencyMap:
    req.validate()
    activation = req.tape[req.target_layer]
    gradient = backward_to_layer(req.model, req.tape, req.class_idx, req.target_layer)
    alpha = gradient.mean(axis=(1, 2))
    cam = np.tensordot(alpha, activation, axes=([0], [0]))
    return SaliencyMap(np.maximum(cam, 0.0), req.target_layer, "gradcam")


def _split_mass(parent_mass: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    # parents with nothing positive below them absorb their mass
    ratio = np.zeros_like(parent_mass)
    live = denominator > 0
    ratio[live] = parent_mass[live] / denominator[live]
    return ratio


def _excitation_mass(req: AttributionRequest, top_weight_sign: float = 1.0) -> np.ndarray:
    model, tape = req.model, req.tape
    for index in range(req.target_layer, len(model.layers)):
        if isinstance(model.layers[index], (Conv, Linear)) and np.any(tape[index] < 0):
            raise InvalidArgumentError(
                f"excitation backprop needs non-negative inputs at layer {index}"
            )
    top = len(model.layers) - 1
    mass = np.zeros(model.num_classes)
    mass[req.class_idx] = 1.0
    for index in range(top, req.target_layer - 1, -1):
        layer = model.layers[index]
        below = tape[index]
        if isinstance(layer, Linear):
            weight = model.weights[index] * (top_weight_sign if index == top else 1.0)
            positive = np.maximum(weight, 0.0)
            ratio = _split_mass(mass, positive @ below)
            mass = below * (positive.T @ ratio)
        elif isinstance(layer, Conv):
            positive = np.maximum(model.weights[index], 0.0)
            denominator = conv_forward(below[None], positive, None)[0]
            ratio = _split_mass(mass, denominator)
            mass = below * conv_backward_input(ratio[None], positive)[0]
        elif isinstance(layer, MaxPool):
            mass = unpool(mass[None], tape.winners[index + 1][None])[0]
        elif isinstance(layer, Flatten):
            mass = mass.reshape(below.shape)
        # ReLU passes mass through unchanged
    return mass


def excitation_backprop(req: AttributionRequest) -> SaliencyMap:
    req.validate()
    mass = _excitation_mass(req)
    return SaliencyMap(mass.sum(axis=0), req.target_layer, "ebp")


def contrastive_ebp(req: AttributionRequest) -> SaliencyMap:
    req.validate()
    positive = _excitation_mass(req).sum(axis=0)
    negative = _excitation_mass(req, top_weight_sign=-1.0).sum(axis=0)
    return SaliencyMap(np.maximum(positive - negative, 0.0), req.target_layer, "cebp")


def present_baseline(s: SaliencyMap, height: int, width: int) -> np.ndarray:
    return normalize_max(upsample_bilinear(s.map, height, width))


METHODS: Dict[str, Callable[[AttributionRequest], SaliencyMap]] = {
    "gradcam": grad_cam,
    "ebp": excitation_backprop,
    "cebp": contrastive_ebp,
}


def method_names() -> List[str]:
    return list(METHODS)
