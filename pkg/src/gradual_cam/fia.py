"""Faithfulness, interpretability and applicability metrics for saliency methods.

Faithfulness is the area under a pixel-flipping curve (lower is better), interpretability
is the count of significant pixels, applicability is the wall-clock cost of the explanation
pipeline measured over repeated runs.
"""

import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attribution import present_baseline
from .autonet import Model, forward, predict_proba
from .errors import EmptyCohortError, InvalidArgumentError, ShapeError
from .explain import PipelineTask, as_model_image, build_task, method_tag, parse_method_tag
from .run_log import record_event
from .trainer import LabeledImage, stack_dataset
from .util import atomic_write_files, format_float, rows_to_csv

REPLACEMENTS = ("zero", "mean")
REFERENCE_OVERHEAD = 0.10
REPORT_FORMAT = "gradual-cam-fia 1"
SCORE_DEFINITION = "mean softmax probability of the originally predicted class"


@dataclass(frozen=True, eq=False)
class FlipCurve:
    fractions: np.ndarray
    scores: np.ndarray
    method: str = ""
    image_id: str = ""
    replacement: str = "zero"

    def __len__(self) -> int:
        return len(self.fractions)


@dataclass(frozen=True)
class FiaConfig:
    steps: int = 64
    threshold: float = 0.5
    replacement: str = "zero"
    runs: int = 30
    warmup: int = 3
    min_confidence: float = 0.99
    seed: int = 0
    max_images: Optional[int] = None

    def validate(self) -> None:
        if self.steps < 1:
            raise InvalidArgumentError("steps must be at least 1")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidArgumentError("threshold must lie in (0, 1)")
        if self.replacement not in REPLACEMENTS:
            raise InvalidArgumentError(f"replacement must be one of {REPLACEMENTS}")
        if self.runs < 2:
            raise InvalidArgumentError("runtime benchmark needs at least 2 runs")
        if self.warmup < 0:
            raise InvalidArgumentError("warm-up runs must be non-negative")
        if not 0.0 <= self.min_confidence <= 1.0:
            raise InvalidArgumentError("min_confidence must lie in [0, 1]")
        if self.max_images is not None and self.max_images < 1:
            raise InvalidArgumentError("max_images must be positive")


@dataclass(frozen=True)
class RuntimeStats:
    mean_seconds: float
    std_seconds: float
    samples: Tuple[float, ...]

    @property
    def runs(self) -> int:
        return len(self.samples)


@dataclass(eq=False)
class MethodSummary:
    tag: str
    method: str
    gradual: bool
    images: int
    mean_curve: FlipCurve
    aucs: List[float]
    significant_counts: List[int]
    runtime: RuntimeStats
    pipeline_runtime: RuntimeStats

    @property
    def auc_mean(self) -> float:
        return float(np.mean(self.aucs))

    @property
    def significant_pixels_median(self) -> float:
        return float(np.median(self.significant_counts))


@dataclass(frozen=True)
class Comparison:
    method: str
    images: int
    delta_auc: float
    delta_significant_pixels_median: float
    overhead_ratio: float
    overhead_ms: float
    pipeline_overhead_ratio: float
    reference_overhead_ratio: float = REFERENCE_OVERHEAD


@dataclass(eq=False)
class FiaReport:
    config: FiaConfig
    images: int
    image_ids: List[str]
    methods: List[MethodSummary]
    comparisons: List[Comparison] = field(default_factory=list)


# Faithfulness


def _flip_counts(pixels: int, steps: int) -> np.ndarray:
    """Pixels flipped after each step: floor(k * pixels / steps), strictly increasing."""
    if steps > pixels:
        raise InvalidArgumentError(f"{steps} steps exceed the {pixels} pixels of the image")
    return np.arange(steps + 1, dtype=np.int64) * pixels // steps


def pixel_flip_curve(
    model: Model,
    image: np.ndarray,
    saliency: np.ndarray,
    steps: int = 64,
    replacement: str = "zero",
    *,
    mean_image: Optional[np.ndarray] = None,
    method: str = "",
    image_id: str = "",
    tie_break: Optional[np.ndarray] = None,
) -> FlipCurve:
    """Flip pixels from most to least salient and record the predicted class score.

    Equal saliency values are ordered by descending ``tie_break`` when given, then
    row-major.
    """
    image = as_model_image(model, image)
    if image.shape != model.input_shape:
        raise ShapeError(
            f"image shape {image.shape} does not match model input {model.input_shape}"
        )
    saliency = np.asarray(saliency, dtype=np.float64)
    if saliency.shape != image.shape[-2:]:
        raise ShapeError(f"saliency {saliency.shape} does not match image {image.shape[-2:]}")
    if steps < 1:
        raise InvalidArgumentError("steps must be at least 1")
    if replacement == "zero":
        fill = np.zeros_like(image)
    elif replacement == "mean":
        if mean_image is None:
            raise InvalidArgumentError("mean replacement needs the dataset mean image")
        fill = np.broadcast_to(as_model_image(model, mean_image), image.shape)
    else:
        raise InvalidArgumentError(f"replacement must be one of {REPLACEMENTS}")

    height, width = saliency.shape
    pixels = height * width
    counts = _flip_counts(pixels, steps)
    if tie_break is None:
        order = np.argsort(-saliency.ravel(), kind="stable")
    else:
        secondary = np.asarray(tie_break, dtype=np.float64)
        if secondary.shape != saliency.shape:
            raise ShapeError(f"tie-break map {secondary.shape} does not match {saliency.shape}")
        order = np.lexsort((-secondary.ravel(), -saliency.ravel()))

    batch = np.empty((steps + 1,) + image.shape)
    current = image.reshape(image.shape[0], pixels).copy()
    source = fill.reshape(image.shape[0], pixels)
    batch[0] = image
    for k in range(1, steps + 1):
        flipped = order[counts[k - 1] : counts[k]]
        current[:, flipped] = source[:, flipped]
        batch[k] = current.reshape(image.shape)

    probabilities = predict_proba(model, batch)
    predicted = int(np.argmax(probabilities[0]))
    return FlipCurve(
        fractions=counts / pixels,
        scores=probabilities[:, predicted],
        method=method,
        image_id=image_id,
        replacement=replacement,
    )


def auc_flip(curve: FlipCurve) -> float:
    fractions = np.asarray(curve.fractions, dtype=np.float64)
    scores = np.asarray(curve.scores, dtype=np.float64)
    return float(np.sum(np.diff(fractions) * (scores[1:] + scores[:-1]) / 2.0))


# Interpretability


def significant_pixels(saliency: np.ndarray, threshold_frac: float) -> Tuple[int, np.ndarray]:
    if not 0.0 < threshold_frac < 1.0:
        raise InvalidArgumentError(f"threshold {threshold_frac} outside (0, 1)")
    saliency = np.asarray(saliency, dtype=np.float64)
    peak = saliency.max() if saliency.size else 0.0
    if peak <= 0:
        return 0, np.zeros_like(saliency)
    mask = (saliency >= threshold_frac * peak).astype(np.float64)
    return int(mask.sum()), mask


# Applicability


def runtime_benchmark(
    task: PipelineTask, runs: int = 30, warmup: int = 3, *, full_pipeline: bool = False
) -> RuntimeStats:
    """Wall-clock seconds per run of the attribution and, for gradual tasks, its stages.

    ``full_pipeline`` also times the bilinear presentation of non-gradual tasks.
    """
    if runs < 2:
        raise InvalidArgumentError("runtime benchmark needs at least 2 runs")
    call = task.run if full_pipeline else task.run_timed_span
    for _ in range(warmup):
        call()
    samples: List[float] = []
    for _ in range(runs):
        start = time.perf_counter()
        call()
        samples.append(time.perf_counter() - start)
    return RuntimeStats(
        mean_seconds=statistics.fmean(samples),
        std_seconds=statistics.stdev(samples),
        samples=tuple(samples),
    )


# Suite


def qualifying_indices(
    model: Model, dataset: Sequence[LabeledImage], min_confidence: float
) -> np.ndarray:
    images, labels = stack_dataset(dataset)
    probabilities = predict_proba(model, images)
    predicted = probabilities.argmax(axis=1)
    confident = probabilities[np.arange(len(labels)), predicted] >= min_confidence
    return np.flatnonzero((predicted == labels) & confident)


def _mean_curve(curves: List[FlipCurve], tag: str, replacement: str) -> FlipCurve:
    scores = np.mean([curve.scores for curve in curves], axis=0)
    return FlipCurve(curves[0].fractions, scores, tag, "mean", replacement)


def compare_methods(methods: Sequence[MethodSummary]) -> List[Comparison]:
    by_tag: Dict[str, MethodSummary] = {}
    for summary in methods:
        by_tag.setdefault(summary.tag, summary)
    comparisons: List[Comparison] = []
    seen: List[str] = []
    for summary in methods:
        if summary.method in seen:
            continue
        baseline = by_tag.get(method_tag(summary.method, False))
        enhanced = by_tag.get(method_tag(summary.method, True))
        if baseline is None or enhanced is None:
            continue
        seen.append(summary.method)
        base_mean = baseline.runtime.mean_seconds
        pipeline_mean = baseline.pipeline_runtime.mean_seconds
        comparisons.append(
            Comparison(
                method=summary.method,
                images=enhanced.images,
                delta_auc=enhanced.auc_mean - baseline.auc_mean,
                delta_significant_pixels_median=(
                    enhanced.significant_pixels_median - baseline.significant_pixels_median
                ),
                overhead_ratio=(enhanced.runtime.mean_seconds - base_mean) / base_mean,
                overhead_ms=(enhanced.runtime.mean_seconds - base_mean) * 1000.0,
                pipeline_overhead_ratio=(
                    (enhanced.pipeline_runtime.mean_seconds - pipeline_mean) / pipeline_mean
                ),
            )
        )
    return comparisons


def run_fia(
    model: Model,
    dataset: Sequence[LabeledImage],
    methods: Sequence[str],
    config: FiaConfig = FiaConfig(),
    *,
    log_path: Optional[Path] = None,
) -> FiaReport:
    config.validate()
    if not dataset:
        raise InvalidArgumentError("evaluation needs a non-empty dataset")
    if not methods:
        raise InvalidArgumentError("evaluation needs at least one method")
    parsed = [parse_method_tag(tag) for tag in methods]

    cohort = qualifying_indices(model, dataset, config.min_confidence)
    if cohort.size == 0:
        raise EmptyCohortError(
            f"no image is classified correctly with confidence >= {config.min_confidence}"
        )
    if config.max_images is not None and cohort.size > config.max_images:
        rng = np.random.default_rng(config.seed)
        cohort = np.sort(rng.choice(cohort, size=config.max_images, replace=False))

    mean_image = np.mean([item.image for item in dataset], axis=0)
    image_ids = [f"img-{index:05d}" for index in cohort]
    tapes = []
    for index in cohort:
        logits, tape = forward(model, dataset[index].image)
        tapes.append((int(np.argmax(logits)), tape))

    summaries: List[MethodSummary] = []
    for method, gradual in parsed:
        start = time.perf_counter()
        tag = method_tag(method, gradual)
        curves: List[FlipCurve] = []
        aucs: List[float] = []
        counts: List[int] = []
        tasks: List[PipelineTask] = []
        for index, image_id, (predicted, tape) in zip(cohort, image_ids, tapes):
            task = build_task(model, tape, method, gradual, predicted)
            tasks.append(task)
            base, saliency, _ = task.run_detailed(with_stages=False)
            # zero-saliency regions of a gradual map keep the coarse map's ordering
            tie_break = present_baseline(base, *saliency.shape) if gradual else None
            curve = pixel_flip_curve(
                model,
                dataset[index].image,
                saliency,
                config.steps,
                config.replacement,
                mean_image=mean_image,
                method=tag,
                image_id=image_id,
                tie_break=tie_break,
            )
            curves.append(curve)
            aucs.append(auc_flip(curve))
            counts.append(significant_pixels(saliency, config.threshold)[0])
        runtime = runtime_benchmark(tasks[0], config.runs, config.warmup)
        pipeline_runtime = runtime_benchmark(
            tasks[0], config.runs, config.warmup, full_pipeline=True
        )
        summary = MethodSummary(
            tag=tag,
            method=method,
            gradual=gradual,
            images=len(cohort),
            mean_curve=_mean_curve(curves, tag, config.replacement),
            aucs=aucs,
            significant_counts=counts,
            runtime=runtime,
            pipeline_runtime=pipeline_runtime,
        )
        summaries.append(summary)
        record_event(
            log_path,
            "fia.method",
            start,
            context={
                "method": tag,
                "images": summary.images,
                "auc_mean": summary.auc_mean,
                "significant_pixels_median": summary.significant_pixels_median,
                "runs": runtime.runs,
            },
        )

    return FiaReport(
        config=config,
        images=len(cohort),
        image_ids=image_ids,
        methods=summaries,
        comparisons=compare_methods(summaries),
    )


# Export


def curve_to_csv(curve: FlipCurve) -> str:
    rows = [[float(f), float(s)] for f, s in zip(curve.fractions, curve.scores)]
    return rows_to_csv(["fraction", "score"], rows)


def curve_file_names(report: FiaReport) -> List[str]:
    names: List[str] = []
    for summary in report.methods:
        name = f"curve-{summary.tag}.csv"
        suffix = 2
        while name in names:
            name = f"curve-{summary.tag}-{suffix}.csv"
            suffix += 1
        names.append(name)
    return names


def report_to_text(report: FiaReport) -> str:
    cfg = report.config
    lines = [
        f"format = {REPORT_FORMAT}",
        f"images = {report.images}",
        f"methods = {len(report.methods)}",
        f"steps = {cfg.steps}",
        f"replacement = {cfg.replacement}",
        f"threshold = {format_float(cfg.threshold)}",
        f"min_confidence = {format_float(cfg.min_confidence)}",
        f"runs = {cfg.runs}",
        f"warmup = {cfg.warmup}",
        f"score = {SCORE_DEFINITION}",
        f"image_ids = {' '.join(report.image_ids)}",
    ]
    for summary, curve_name in zip(report.methods, curve_file_names(report)):
        lines += [
            "",
            f"[method {summary.tag}]",
            f"images = {summary.images}",
            f"auc_mean = {format_float(summary.auc_mean)}",
            f"auc_std = {format_float(float(np.std(summary.aucs)))}",
            f"significant_pixels_median = {format_float(summary.significant_pixels_median)}",
            f"runtime_runs = {summary.runtime.runs}",
            f"runtime_mean_ms = {format_float(summary.runtime.mean_seconds * 1000.0)}",
            f"runtime_std_ms = {format_float(summary.runtime.std_seconds * 1000.0)}",
            "runtime_pipeline_mean_ms = "
            f"{format_float(summary.pipeline_runtime.mean_seconds * 1000.0)}",
            f"curve_file = {curve_name}",
        ]
    for comparison in report.comparisons:
        lines += [
            "",
            f"[compare {comparison.method}]",
            f"images = {comparison.images}",
            f"delta_auc = {format_float(comparison.delta_auc)}",
            "delta_significant_pixels_median = "
            f"{format_float(comparison.delta_significant_pixels_median)}",
            f"overhead_ratio = {format_float(comparison.overhead_ratio)}",
            f"overhead_ms = {format_float(comparison.overhead_ms)}",
            f"pipeline_overhead_ratio = {format_float(comparison.pipeline_overhead_ratio)}",
            f"reference_overhead_ratio = {format_float(comparison.reference_overhead_ratio)}",
        ]
    return "\n".join(lines) + "\n"


def write_fia_report(report: FiaReport, out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    contents = [("report.txt", report_to_text(report))]
    for summary, name in zip(report.methods, curve_file_names(report)):
        contents.append((name, curve_to_csv(summary.mean_curve)))
    files = [(name, text.encode("utf-8")) for name, text in contents]
    return atomic_write_files(out_dir, files, stale=["curve-*.csv"])


def headline_lines(report: FiaReport) -> List[str]:
    lines = [f"Evaluated {report.images} image(s)."]
    for comparison in report.comparisons:
        lines.append(
            f"{comparison.method}: dAUC {comparison.delta_auc:+.4f}, "
            f"d median significant pixels {comparison.delta_significant_pixels_median:+.1f}, "
            f"overhead {comparison.overhead_ratio * 100:.1f}% ({comparison.overhead_ms:.3f} ms; "
            f"pipeline {comparison.pipeline_overhead_ratio * 100:.1f}%; "
            f"reference {comparison.reference_overhead_ratio * 100:.0f}%)"
        )
    if not report.comparisons:
        for summary in report.methods:
            lines.append(
                f"{summary.tag}: AUC {summary.auc_mean:.4f}, median significant pixels "
                f"{summary.significant_pixels_median:.1f}, "
                f"{summary.runtime.mean_seconds * 1000:.3f} ms"
            )
    return lines
