"""Explanation pipeline: forward pass, base attribution, then baseline or gradual presentation."""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .attribution import (
    METHODS,
    AttributionRequest,
    SaliencyMap,
    default_target_layer,
    present_baseline,
)
from .autonet import ActivationTape, Model, forward, softmax
from .errors import InvalidArgumentError
from .gradual import StagePlan, build_stage_plan, gradual_extrapolate, gradual_stages

PRESENTATIONS = ("bilinear", "gradual")


def parse_method_tag(tag: str) -> Tuple[str, bool]:
    """Split ``gradcam-gradual`` style tags into (base method, gradual flag)."""
    text = tag.strip().lower().replace("grad-cam", "gradcam")
    base, _, presentation = text.partition("-")
    if base not in METHODS:
        raise InvalidArgumentError(f"unknown method '{tag}'; expected one of {sorted(METHODS)}")
    if presentation and presentation not in PRESENTATIONS:
        raise InvalidArgumentError(f"unknown presentation '{presentation}' in '{tag}'")
    return base, presentation == "gradual"


def method_tag(method: str, gradual: bool) -> str:
    return f"{method}-{'gradual' if gradual else 'bilinear'}"


@dataclass(frozen=True, eq=False)
class PipelineTask:
    model: Model
    tape: ActivationTape
    method: str
    class_idx: int
    target_layer: int
    plan: Optional[StagePlan] = None

    @property
    def gradual(self) -> bool:
        return self.plan is not None

    @property
    def tag(self) -> str:
        return method_tag(self.method, self.gradual)

    def attribute(self) -> SaliencyMap:
        request = AttributionRequest(self.model, self.tape, self.class_idx, self.target_layer)
        return METHODS[self.method](request)

    def run_detailed(
        self, with_stages: bool = True
    ) -> Tuple[SaliencyMap, np.ndarray, List[np.ndarray]]:
        base = self.attribute()
        if self.plan is None:
            height, width = self.tape[0].shape[-2:]
            return base, present_baseline(base, height, width), []
        saliency = gradual_extrapolate(base, self.tape, self.plan)
        stages = gradual_stages(base, self.tape, self.plan)[1:] if with_stages else []
        return base, saliency, stages

    def run(self) -> np.ndarray:
        return self.run_detailed(with_stages=False)[1]

    def run_timed_span(self) -> np.ndarray:
        """Attribution plus the gradual stages, the span the runtime benchmark measures."""
        base = self.attribute()
        if self.plan is None:
            return base.map
        return gradual_extrapolate(base, self.tape, self.plan)


def build_task(
    model: Model,
    tape: ActivationTape,
    method: str,
    gradual: bool,
    class_idx: int,
    target_layer: Optional[int] = None,
) -> PipelineTask:
    if method not in METHODS:
        raise InvalidArgumentError(f"unknown method '{method}'")
    target = default_target_layer(model) if target_layer is None else target_layer
    plan = build_stage_plan(model, target) if gradual else None
    return PipelineTask(model, tape, method, class_idx, target, plan)


@dataclass(eq=False)
class Explanation:
    method: str
    gradual: bool
    predicted_class: int
    label: str
    confidence: float
    target_layer: int
    base: SaliencyMap
    saliency: np.ndarray
    stages: List[np.ndarray] = field(default_factory=list)

    @property
    def tag(self) -> str:
        return method_tag(self.method, self.gradual)


def as_model_image(model: Model, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2 and len(model.input_shape) == 3 and model.input_shape[0] == 1:
        image = image[None]
    return image


def explain_image(
    model: Model,
    image: np.ndarray,
    method: str,
    gradual: bool,
    target_layer: Optional[int] = None,
    class_idx: Optional[int] = None,
) -> Explanation:
    logits, tape = forward(model, as_model_image(model, image))
    probabilities = softmax(logits)
    predicted = int(np.argmax(logits))
    chosen = predicted if class_idx is None else class_idx
    task = build_task(model, tape, method, gradual, chosen, target_layer)
    base, saliency, stages = task.run_detailed()
    return Explanation(
        method=method,
        gradual=gradual,
        predicted_class=predicted,
        label=model.labels[predicted],
        confidence=float(probabilities[predicted]),
        target_layer=task.target_layer,
        base=base,
        saliency=saliency,
        stages=stages,
    )
