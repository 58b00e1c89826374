import csv
import io
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autonet import (
    SHAPE_LABELS,
    Model,
    backward_batch,
    predict_logits,
    run_layers,
    softmax_rows,
)
from .errors import InvalidArgumentError, ParseError, TrainingError
from .netpbm import encode_pgm, read_pgm
from .run_log import log, record_event
from .util import atomic_write_files

SUPPORTED_DIMS = {(32, 32), (64, 64)}
BACKGROUND_MAX = 0.3
LABELS_FILE = "labels.csv"


@dataclass(frozen=True, eq=False)
class LabeledImage:
    image: np.ndarray
    label: int


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 20
    learning_rate: float = 0.05
    batch_size: int = 16
    train_count: int = 2000
    test_count: int = 300

    def validate(self) -> None:
        if self.seed < 0:
            raise InvalidArgumentError("seed must be non-negative")
        for name in ("epochs", "batch_size", "train_count", "test_count"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise InvalidArgumentError("learning_rate must be a finite non-negative number")


@dataclass(eq=False)
class TrainReport:
    model: Model
    epoch_losses: List[float]
    train_accuracy: float
    test_accuracy: float
    config: TrainConfig

    def to_dict(self) -> Dict[str, object]:
        return {
            "arch": self.model.name,
            "config": asdict(self.config),
            "epoch_losses": self.epoch_losses,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
        }


# Synthetic shapes


def _render_shape(rng: np.random.Generator, label: int, height: int, width: int) -> np.ndarray:
    image = rng.uniform(0.0, BACKGROUND_MAX, size=(height, width))
    size = rng.uniform(0.3, 0.5) * min(height, width)
    half = size / 2.0
    cy = rng.uniform(half + 1.0, height - half - 1.0)
    cx = rng.uniform(half + 1.0, width - half - 1.0)
    intensity = rng.uniform(0.6, 1.0)
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    if label == 0:
        mask = (np.abs(ys - cy) <= half) & (np.abs(xs - cx) <= half)
    elif label == 1:
        mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= half**2
    else:
        top = cy - half
        mask = (ys >= top) & (ys <= cy + half) & (np.abs(xs - cx) <= (ys - top) / 2.0)
    image[mask] = intensity
    return image


def make_image(seed: int, index: int, height: int, width: int) -> LabeledImage:
    label = index % len(SHAPE_LABELS)
    rng = np.random.default_rng([seed, index])
    image = _render_shape(rng, label, height, width)
    return LabeledImage(image=image[None], label=label)


def generate_dataset(seed: int, n: int, height: int, width: int) -> List[LabeledImage]:
    if n < 1:
        raise InvalidArgumentError("dataset size must be at least 1")
    if seed < 0:
        raise InvalidArgumentError("seed must be non-negative")
    if (height, width) not in SUPPORTED_DIMS:
        raise InvalidArgumentError(
            f"unsupported image size {height}x{width}; expected one of {sorted(SUPPORTED_DIMS)}"
        )
    return [make_image(seed, index, height, width) for index in range(n)]


def export_dataset(dataset: Sequence[LabeledImage], directory: Path) -> Path:
    directory = Path(directory)
    manifest = io.StringIO()
    writer = csv.writer(manifest, lineterminator="\n")
    writer.writerow(["filename", "label"])
    width = max(5, len(str(len(dataset))))
    files: List[Tuple[str, bytes]] = []
    for index, item in enumerate(dataset):
        name = f"img-{index:0{width}d}.pgm"
        files.append((name, encode_pgm(item.image)))
        writer.writerow([name, item.label])
    files.append((LABELS_FILE, manifest.getvalue().encode("utf-8")))
    atomic_write_files(directory, files, stale=["img-*.pgm"])
    return directory / LABELS_FILE


def import_dataset(directory: Path) -> List[LabeledImage]:
    directory = Path(directory)
    manifest = directory / LABELS_FILE
    if not manifest.exists():
        raise InvalidArgumentError(f"label manifest not found: {manifest}")
    dataset: List[LabeledImage] = []
    with manifest.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != ["filename", "label"]:
            raise ParseError(f"{manifest.name} header must be 'filename,label'", 0)
        for row in reader:
            line = reader.line_num
            filename = row.get("filename")
            if not filename or row.get("label") is None or None in row:
                raise ParseError(f"{manifest.name} line {line} needs exactly 2 fields", 0)
            try:
                label = int(row["label"])
            except ValueError as exc:
                raise ParseError(f"bad label on line {line}", 0) from exc
            if not 0 <= label < len(SHAPE_LABELS):
                raise ParseError(
                    f"label {label} on line {line} outside 0..{len(SHAPE_LABELS) - 1}", 0
                )
            image = read_pgm(directory / filename)
            dataset.append(LabeledImage(image=image[None], label=label))
    if not dataset:
        raise InvalidArgumentError(f"empty dataset in {directory}")
    return dataset


def stack_dataset(dataset: Sequence[LabeledImage]) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([item.image for item in dataset]).astype(np.float64)
    labels = np.array([item.label for item in dataset], dtype=np.int64)
    return images, labels


# Training


def loss_and_gradients(
    model: Model, images: np.ndarray, labels: np.ndarray
) -> Tuple[float, Dict[int, Tuple[np.ndarray, np.ndarray]]]:
    activations, winners = run_layers(model, images)
    logits = activations[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    grad = softmax_rows(logits)
    grad[rows, labels] -= 1.0
    grad /= len(labels)
    param_grads: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    backward_batch(model, activations, winners, grad, stop=0, param_grads=param_grads)
    return loss, param_grads


def _apply_step(
    weights: List[Optional[np.ndarray]],
    biases: List[Optional[np.ndarray]],
    grads: Dict[int, Tuple[np.ndarray, np.ndarray]],
    learning_rate: float,
) -> None:
    for index, (d_weight, d_bias) in grads.items():
        weights[index] = weights[index] - learning_rate * d_weight
        biases[index] = biases[index] - learning_rate * d_bias


def sgd_step(model: Model, images: np.ndarray, labels: np.ndarray, learning_rate: float) -> Model:
    _, grads = loss_and_gradients(model, images, labels)
    weights, biases = list(model.weights), list(model.biases)
    _apply_step(weights, biases, grads, learning_rate)
    return model.with_params(weights, biases)


def accuracy(model: Model, dataset: Sequence[LabeledImage]) -> float:
    if not dataset:
        return 0.0
    images, labels = stack_dataset(dataset)
    predicted = predict_logits(model, images).argmax(axis=1)
    return float(np.mean(predicted == labels))


def train(
    model: Model,
    dataset: Sequence[LabeledImage],
    config: TrainConfig,
    *,
    log_path: Optional[Path] = None,
    verbose: bool = False,
) -> TrainReport:
    config.validate()
    if not dataset:
        raise InvalidArgumentError("training needs a non-empty dataset")
    if len(dataset) < config.train_count + config.test_count:
        raise InvalidArgumentError(
            f"dataset has {len(dataset)} images, config needs "
            f"{config.train_count} train + {config.test_count} test"
        )
    train_set = list(dataset[: config.train_count])
    test_set = list(dataset[config.train_count : config.train_count + config.test_count])
    images, labels = stack_dataset(train_set)
    rng = np.random.default_rng(config.seed)
    weights, biases = list(model.weights), list(model.biases)
    current = model
    epoch_losses: List[float] = []

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train_set))
        total = 0.0
        for begin in range(0, len(order), config.batch_size):
            batch = order[begin : begin + config.batch_size]
            loss, grads = loss_and_gradients(current, images[batch], labels[batch])
            if not np.isfinite(loss):
                record_event(log_path, "train.epoch", start, success=False,
                             error_type="TrainingError", context={"epoch": epoch})
                raise TrainingError(f"training diverged at epoch {epoch} (loss {loss})", epoch)
            total += loss * len(batch)
            _apply_step(weights, biases, grads, config.learning_rate)
            try:
                current = model.with_params(weights, biases)
            except ValueError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}: {exc}", epoch) from exc
        epoch_loss = total / len(train_set)
        epoch_losses.append(epoch_loss)
        record_event(log_path, "train.epoch", start,
                     context={"epoch": epoch, "loss": epoch_loss, "arch": model.name})
        if verbose:
            log(f"epoch {epoch}/{config.epochs} loss {epoch_loss:.6f}")

    report = TrainReport(
        model=current,
        epoch_losses=epoch_losses,
        train_accuracy=accuracy(current, train_set),
        test_accuracy=accuracy(current, test_set),
        config=config,
    )
    return report
