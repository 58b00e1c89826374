"""Gradual extrapolation of a coarse saliency map back to input resolution.

Each MaxPool between the input and the map's layer is one stage: the current map is
block-replicated by the pool stride and gated by the contribution matrix (channel mean,
max-normalized) of the last post-ReLU activation at the pre-pool resolution.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .attribution import SaliencyMap
from .autonet import POOL, ActivationTape, Conv, MaxPool, Model, ReLU
from .errors import InvalidArgumentError, ShapeError, ValidationError
from .tensor import as_matrix, hadamard, normalize_max, upsample_nearest


@dataclass(frozen=True, eq=False)
class ContributionMatrix:
    m: np.ndarray
    source_layer: int
    channels: int


@dataclass(frozen=True)
class Stage:
    pool_index: int
    guidance_index: int
    factor: int


@dataclass(frozen=True)
class StagePlan:
    target_layer: int
    start_dims: Tuple[int, int]
    output_dims: Tuple[int, int]
    stages: Tuple[Stage, ...]

    def __len__(self) -> int:
        return len(self.stages)


def contribution_matrix(activation: np.ndarray, source_layer: int = -1) -> ContributionMatrix:
    activation = np.asarray(activation, dtype=np.float64)
    if activation.ndim != 3:
        raise ShapeError(f"contribution matrix needs a CxHxW activation, got {activation.shape}")
    if np.any(activation < 0):
        raise InvalidArgumentError("contribution matrix needs non-negative (post-ReLU) input")
    channels = activation.shape[0]
    mean = activation.sum(axis=0) / channels
    return ContributionMatrix(normalize_max(mean), source_layer, channels)


def _guidance_for_pool(model: Model, pool_layer: int) -> int:
    """Tape index of the last ReLU output feeding ``pool_layer`` at its input resolution."""
    spatial = model.shapes[pool_layer][1:]
    for index in range(pool_layer - 1, -1, -1):
        layer = model.layers[index]
        if isinstance(layer, MaxPool):
            break
        if isinstance(layer, ReLU) and model.shapes[index + 1][1:] == spatial:
            return index + 1
        if not isinstance(layer, (Conv, ReLU)):
            break
    raise ValidationError(f"no post-ReLU activation feeds the MaxPool at layer {pool_layer}")


def build_stage_plan(model: Model, target_layer: int) -> StagePlan:
    if not 0 <= target_layer <= len(model.layers):
        raise InvalidArgumentError(f"target layer {target_layer} outside the tape")
    target_shape = model.shapes[target_layer]
    if len(target_shape) != 3:
        raise InvalidArgumentError(f"target layer {target_layer} is not spatial")
    stages: List[Stage] = []
    for layer_index in range(target_layer - 1, -1, -1):
        if not isinstance(model.layers[layer_index], MaxPool):
            continue
        before = model.shapes[layer_index]
        if before[1] % POOL or before[2] % POOL:
            raise ValidationError(f"odd dims {before} before MaxPool at layer {layer_index}")
        stages.append(Stage(layer_index + 1, _guidance_for_pool(model, layer_index), POOL))
    input_shape = model.shapes[0]
    if len(input_shape) != 3:
        raise ValidationError("gradual extrapolation needs a CxHxW model input")
    plan = StagePlan(
        target_layer=target_layer,
        start_dims=(target_shape[1], target_shape[2]),
        output_dims=(input_shape[1], input_shape[2]),
        stages=tuple(stages),
    )
    scale = POOL ** len(stages)
    if (plan.start_dims[0] * scale, plan.start_dims[1] * scale) != plan.output_dims:
        raise ValidationError(
            f"{len(stages)} stages from {plan.start_dims} do not restore {plan.output_dims}"
        )
    return plan


def gradual_stages(base: SaliencyMap, tape: ActivationTape, plan: StagePlan) -> List[np.ndarray]:
    """Per-stage maps before the final normalization, first entry is the normalized base."""
    current = normalize_max(base.map)
    if current.shape != plan.start_dims:
        raise ShapeError(f"base map {current.shape} does not match plan start {plan.start_dims}")
    maps = [current]
    for number, stage in enumerate(plan.stages, start=1):
        guidance = contribution_matrix(tape[stage.guidance_index], stage.guidance_index)
        expanded = upsample_nearest(current, stage.factor)
        if expanded.shape != guidance.m.shape:
            raise ShapeError(
                f"stage {number}: expanded map {expanded.shape} vs guidance "
                f"{guidance.m.shape} from tape entry {stage.guidance_index}"
            )
        current = hadamard(expanded, guidance.m)
        maps.append(current)
    return maps


def gradual_extrapolate(base: SaliencyMap, tape: ActivationTape, plan: StagePlan) -> np.ndarray:
    """Input-resolution map, equal to ``normalize_max(gradual_stages(...)[-1])``.

    Channel counts and per-stage maxima are scalar factors that cancel in the final
    normalization, so raw channel sums stand in for the contribution matrices and each
    block expansion is folded into the product.
    """
    current = as_matrix(base.map)
    if current.shape != plan.start_dims:
        raise ShapeError(f"base map {current.shape} does not match plan start {plan.start_dims}")
    if np.any(current < 0):
        raise InvalidArgumentError("base map must be non-negative")
    # guidance taps are post-ReLU by plan construction
    for number, stage in enumerate(plan.stages, start=1):
        height, width = current.shape
        factor = stage.factor
        guidance = tape[stage.guidance_index].sum(axis=0)
        if guidance.shape != (height * factor, width * factor):
            raise ShapeError(
                f"stage {number}: {height}x{width} map expanded by {factor} vs guidance "
                f"{guidance.shape} from tape entry {stage.guidance_index}"
            )
        blocks = guidance.reshape(height, factor, width, factor) * current[:, None, :, None]
        current = blocks.reshape(height * factor, width * factor)
    peak = current.max()
    return current / peak if peak > 0 else current.copy()
