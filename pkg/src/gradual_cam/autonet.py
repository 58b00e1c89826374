"""Minimal feed-forward CNN engine.

Layers are fixed-hyperparameter specs (3x3 same-padding convolution, 2x2/2 max pooling,
ReLU, Flatten, Linear). ``forward`` records an :class:`ActivationTape`: entry 0 is the
input image and entry ``i + 1`` is the output of layer ``i``, so the logits are the last
entry. Pooling argmax maps are keyed by the pool's output tape index and number the
window cells 0..3 in row-major order.

Weight file layout (all header lines ASCII, ``\\n`` terminated)::

    GCAMW 1
    arch <name>
    input <d1> [<d2> <d3>]
    labels <label> ...
    layers <count>
    conv <in> <out> | relu | maxpool | flatten | linear <in> <out>   (one per layer)
    tensors <count>
    tensor <name> <length> <d1> ... <dk>                               (one per tensor)
    end
    <payload: little-endian float64 values of every tensor in declared order>
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, ParseError, ShapeError, ValidationError
from .util import atomic_write_bytes

KERNEL = 3
PAD = 1
POOL = 2
FORMAT_MAGIC = "GCAMW"
FORMAT_VERSION = 1
SHAPE_LABELS = ("square", "disk", "triangle")


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int


LayerSpec = Union[Conv, ReLU, MaxPool, Flatten, Linear]
Shape = Tuple[int, ...]


def layer_output_shape(layer: LayerSpec, shape: Shape, index: int = 0) -> Shape:
    if isinstance(layer, Conv):
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise ValidationError(f"layer {index}: conv expects {layer.in_ch}xHxW, got {shape}")
        return (layer.out_ch, shape[1], shape[2])
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise ValidationError(f"layer {index}: maxpool expects CxHxW, got {shape}")
        if shape[1] % POOL or shape[2] % POOL:
            raise ValidationError(f"layer {index}: maxpool needs even height/width, got {shape}")
        return (shape[0], shape[1] // POOL, shape[2] // POOL)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Linear):
        if shape != (layer.in_features,):
            raise ValidationError(
                f"layer {index}: linear expects ({layer.in_features},), got {shape}"
            )
        return (layer.out_features,)
    raise ValidationError(f"layer {index}: unknown layer {layer!r}")


def param_shapes(layer: LayerSpec) -> Optional[Tuple[Shape, Shape]]:
    if isinstance(layer, Conv):
        return (layer.out_ch, layer.in_ch, KERNEL, KERNEL), (layer.out_ch,)
    if isinstance(layer, Linear):
        return (layer.out_features, layer.in_features), (layer.out_features,)
    return None


def _frozen(array: np.ndarray) -> np.ndarray:
    copy = np.array(array, dtype=np.float64, copy=True)
    copy.setflags(write=False)
    return copy


@dataclass(frozen=True, eq=False)
class Model:
    name: str
    input_shape: Shape
    layers: Tuple[LayerSpec, ...]
    weights: Tuple[Optional[np.ndarray], ...]
    biases: Tuple[Optional[np.ndarray], ...]
    labels: Tuple[str, ...] = ()
    shapes: Tuple[Shape, ...] = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) not in (1, 3) or min(self.input_shape) < 1:
            raise ValidationError(f"unsupported input shape {self.input_shape}")
        if not self.layers or not isinstance(self.layers[-1], Linear):
            raise ValidationError("model must end with a Linear layer producing class logits")
        if len(self.weights) != len(self.layers) or len(self.biases) != len(self.layers):
            raise ValidationError("one weight/bias slot per layer is required")
        shapes: List[Shape] = [self.input_shape]
        weights: List[Optional[np.ndarray]] = []
        biases: List[Optional[np.ndarray]] = []
        for index, layer in enumerate(self.layers):
            shapes.append(layer_output_shape(layer, shapes[-1], index))
            expected = param_shapes(layer)
            weight, bias = self.weights[index], self.biases[index]
            if expected is None:
                if weight is not None or bias is not None:
                    raise ValidationError(f"layer {index}: {type(layer).__name__} has no params")
                weights.append(None)
                biases.append(None)
                continue
            if weight is None or bias is None:
                raise ValidationError(f"layer {index}: missing weight or bias")
            if tuple(np.shape(weight)) != expected[0] or tuple(np.shape(bias)) != expected[1]:
                raise ValidationError(
                    f"layer {index}: expected weight {expected[0]} and bias {expected[1]}, "
                    f"got {np.shape(weight)} and {np.shape(bias)}"
                )
            if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
                raise ValidationError(f"layer {index}: non-finite parameters")
            weights.append(_frozen(weight))
            biases.append(_frozen(bias))
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"class{k}" for k in range(shapes[-1][0])))
        if len(self.labels) != shapes[-1][0]:
            raise ValidationError(
                f"{len(self.labels)} labels for {shapes[-1][0]} class logits"
            )
        object.__setattr__(self, "weights", tuple(weights))
        object.__setattr__(self, "biases", tuple(biases))
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def validate(self, strict: bool = False) -> None:
        if strict:
            if not any(isinstance(layer, MaxPool) for layer in self.layers):
                raise ValidationError(f"model '{self.name}' has no MaxPool layer")
            if sum(isinstance(layer, Linear) for layer in self.layers) != 1:
                raise ValidationError(f"model '{self.name}' must have exactly one Linear layer")
            if len(self.input_shape) != 3 or self.input_shape[0] != 1:
                raise ValidationError(f"model '{self.name}' must take 1xHxW images")

    def with_params(
        self,
        weights: Sequence[Optional[np.ndarray]],
        biases: Sequence[Optional[np.ndarray]],
    ) -> "Model":
        return Model(self.name, self.input_shape, self.layers, tuple(weights), tuple(biases),
                     self.labels)


@dataclass(frozen=True, eq=False)
class ActivationTape:
    activations: Tuple[np.ndarray, ...]
    winners: Dict[int, np.ndarray]

    def __len__(self) -> int:
        return len(self.activations)

    def __getitem__(self, index: int) -> np.ndarray:
        return self.activations[index]

    @property
    def logits(self) -> np.ndarray:
        return self.activations[-1]


# Batched kernels: every array below carries a leading batch axis.


def conv_forward(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray]) -> np.ndarray:
    padded = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    windows = sliding_window_view(padded, (KERNEL, KERNEL), axis=(2, 3))
    out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv_backward_input(grad: np.ndarray, weight: np.ndarray) -> np.ndarray:
    flipped = weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
    return conv_forward(grad, flipped, None)


def conv_backward_params(x: np.ndarray, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    padded = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    windows = sliding_window_view(padded, (KERNEL, KERNEL), axis=(2, 3))
    d_weight = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
    return d_weight, grad.sum(axis=(0, 2, 3))


def pool_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // POOL, POOL, w // POOL, POOL).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // POOL, w // POOL, POOL * POOL)
    winners = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, winners[..., None], axis=-1)[..., 0]
    return out, winners


def unpool(values: np.ndarray, winners: np.ndarray) -> np.ndarray:
    n, c, h, w = values.shape
    onehot = np.arange(POOL * POOL) == winners[..., None]
    blocks = (onehot * values[..., None]).reshape(n, c, h, w, POOL, POOL)
    return blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h * POOL, w * POOL)


def run_layers(
    model: Model, x: np.ndarray, start: int = 0, record: bool = True
) -> Tuple[List[np.ndarray], Dict[int, np.ndarray]]:
    activations = [x]
    winners: Dict[int, np.ndarray] = {}
    for index in range(start, len(model.layers)):
        layer = model.layers[index]
        if isinstance(layer, Conv):
            x = conv_forward(x, model.weights[index], model.biases[index])
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0.0)
        elif isinstance(layer, MaxPool):
            x, win = pool_forward(x)
            winners[index + 1] = win
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
        else:
            x = x @ model.weights[index].T + model.biases[index]
        if record:
            activations.append(x)
        else:
            activations[0] = x
    return activations, winners


def backward_batch(
    model: Model,
    activations: Sequence[np.ndarray],
    winners: Dict[int, np.ndarray],
    grad: np.ndarray,
    stop: int = 0,
    param_grads: Optional[Dict[int, Tuple[np.ndarray, np.ndarray]]] = None,
) -> np.ndarray:
    for index in range(len(model.layers) - 1, stop - 1, -1):
        layer = model.layers[index]
        x = activations[index]
        if isinstance(layer, Linear):
            if param_grads is not None:
                param_grads[index] = (grad.T @ x, grad.sum(axis=0))
            grad = grad @ model.weights[index]
        elif isinstance(layer, Conv):
            if param_grads is not None:
                param_grads[index] = conv_backward_params(x, grad)
            grad = conv_backward_input(grad, model.weights[index])
        elif isinstance(layer, ReLU):
            # zero gradient at exactly 0
            grad = grad * (x > 0)
        elif isinstance(layer, MaxPool):
            grad = unpool(grad, winners[index + 1])
        else:
            grad = grad.reshape(x.shape)
    return grad


def _check_image(model: Model, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.input_shape:
        raise ShapeError(
            f"image shape {image.shape} does not match model input {model.input_shape}"
        )
    if not np.all(np.isfinite(image)):
        raise InvalidArgumentError("image contains NaN or Inf")
    return image


def forward(model: Model, image: np.ndarray) -> Tuple[np.ndarray, ActivationTape]:
    image = _check_image(model, image)
    activations, winners = run_layers(model, image[None])
    tape = ActivationTape(
        activations=tuple(a[0] for a in activations),
        winners={key: value[0] for key, value in winners.items()},
    )
    return tape.logits, tape


def forward_from(model: Model, activation: np.ndarray, start: int) -> np.ndarray:
    if not 0 <= start <= len(model.layers):
        raise InvalidArgumentError(f"start index {start} outside 0..{len(model.layers)}")
    activation = np.asarray(activation, dtype=np.float64)
    if activation.shape != model.shapes[start]:
        raise ShapeError(f"activation shape {activation.shape} != {model.shapes[start]}")
    out, _ = run_layers(model, activation[None], start=start, record=False)
    return out[0][0]


def backward_to_layer(
    model: Model, tape: ActivationTape, class_idx: int, layer_idx: int
) -> np.ndarray:
    if not 0 <= class_idx < model.num_classes:
        raise InvalidArgumentError(f"class index {class_idx} outside 0..{model.num_classes - 1}")
    if not 0 <= layer_idx < len(tape):
        raise InvalidArgumentError(f"layer index {layer_idx} outside 0..{len(tape) - 1}")
    top = np.zeros((1, model.num_classes))
    top[0, class_idx] = 1.0
    activations = [a[None] for a in tape.activations]
    winners = {key: value[None] for key, value in tape.winners.items()}
    return backward_batch(model, activations, winners, top, stop=layer_idx)[0]


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or not np.all(np.isfinite(logits)):
        raise InvalidArgumentError("softmax expects a finite 1-D logit vector")
    return softmax_rows(logits)


def predict_logits(model: Model, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.shape[1:] != model.input_shape:
        raise ShapeError(f"batch shape {images.shape} does not match input {model.input_shape}")
    parts = []
    for begin in range(0, images.shape[0], chunk):
        out, _ = run_layers(model, images[begin : begin + chunk], record=False)
        parts.append(out[0])
    return np.concatenate(parts, axis=0)


def predict_proba(model: Model, images: np.ndarray) -> np.ndarray:
    return softmax_rows(predict_logits(model, images))


# Architectures


def net_a(labels: Sequence[str] = SHAPE_LABELS) -> Tuple[Shape, Tuple[LayerSpec, ...]]:
    layers: List[LayerSpec] = []
    for c_in, c_out in ((1, 8), (8, 16), (16, 32)):
        layers += [Conv(c_in, c_out), ReLU(), MaxPool()]
    layers += [Flatten(), Linear(32 * 4 * 4, len(labels))]
    return (1, 32, 32), tuple(layers)


def net_b(labels: Sequence[str] = SHAPE_LABELS) -> Tuple[Shape, Tuple[LayerSpec, ...]]:
    layers: List[LayerSpec] = []
    for c_in, c_out in ((1, 8), (8, 16), (16, 32), (32, 32)):
        layers += [Conv(c_in, c_out), ReLU(), MaxPool()]
    layers += [Flatten(), Linear(32 * 4 * 4, len(labels))]
    return (1, 64, 64), tuple(layers)


ARCHITECTURES: Dict[str, Callable[..., Tuple[Shape, Tuple[LayerSpec, ...]]]] = {
    "net-a": net_a,
    "net-b": net_b,
}


def init_params(
    layers: Sequence[LayerSpec], seed: int
) -> Tuple[List[Optional[np.ndarray]], List[Optional[np.ndarray]]]:
    rng = np.random.default_rng(seed)
    weights: List[Optional[np.ndarray]] = []
    biases: List[Optional[np.ndarray]] = []
    for layer in layers:
        shapes = param_shapes(layer)
        if shapes is None:
            weights.append(None)
            biases.append(None)
            continue
        fan_in = int(np.prod(shapes[0][1:]))
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shapes[0]))
        biases.append(np.zeros(shapes[1]))
    return weights, biases


def init_model(arch: str, seed: int, labels: Sequence[str] = SHAPE_LABELS) -> Model:
    if arch not in ARCHITECTURES:
        raise InvalidArgumentError(f"unknown architecture '{arch}'")
    input_shape, layers = ARCHITECTURES[arch](labels)
    weights, biases = init_params(layers, seed)
    model = Model(arch, input_shape, layers, tuple(weights), tuple(biases), tuple(labels))
    model.validate(strict=True)
    return model


# Weight file


def _layer_token(layer: LayerSpec) -> str:
    if isinstance(layer, Conv):
        return f"conv {layer.in_ch} {layer.out_ch}"
    if isinstance(layer, Linear):
        return f"linear {layer.in_features} {layer.out_features}"
    return {ReLU: "relu", MaxPool: "maxpool", Flatten: "flatten"}[type(layer)]


def _check_token(value: str, what: str) -> None:
    if not value or any(ch.isspace() for ch in value) or not value.isascii():
        raise InvalidArgumentError(f"{what} '{value}' must be non-empty ASCII without spaces")


def encode_model(model: Model) -> bytes:
    _check_token(model.name, "architecture name")
    for label in model.labels:
        _check_token(label, "class label")
    lines = [
        f"{FORMAT_MAGIC} {FORMAT_VERSION}",
        f"arch {model.name}",
        "input " + " ".join(str(d) for d in model.input_shape),
        "labels " + " ".join(model.labels),
        f"layers {len(model.layers)}",
    ]
    lines += [_layer_token(layer) for layer in model.layers]
    tensors: List[Tuple[str, np.ndarray]] = []
    for index, (weight, bias) in enumerate(zip(model.weights, model.biases)):
        if weight is not None:
            tensors.append((f"layer{index}.weight", weight))
            tensors.append((f"layer{index}.bias", bias))
    lines.append(f"tensors {len(tensors)}")
    for name, array in tensors:
        dims = " ".join(str(d) for d in array.shape)
        lines.append(f"tensor {name} {array.size} {dims}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors)
    return header + payload


def save_model(model: Model, path: Path) -> None:
    atomic_write_bytes(Path(path), encode_model(model))


class _HeaderReader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def line(self) -> Tuple[List[str], int]:
        start = self.pos
        end = self.data.find(b"\n", start)
        if end < 0:
            raise ParseError("unterminated header line", start)
        try:
            text = self.data[start:end].decode("ascii")
        except UnicodeDecodeError as exc:
            raise ParseError("non-ASCII header line", start) from exc
        self.pos = end + 1
        return text.split(), start

    def ints(self, tokens: List[str], offset: int) -> List[int]:
        try:
            return [int(t) for t in tokens]
        except ValueError as exc:
            raise ParseError(f"expected integers, got {tokens}", offset) from exc

    def keyed(self, key: str) -> Tuple[List[str], int]:
        tokens, offset = self.line()
        if not tokens or tokens[0] != key:
            raise ParseError(f"expected '{key}' line", offset)
        return tokens[1:], offset


def _parse_layer(tokens: List[str], reader: _HeaderReader, offset: int) -> LayerSpec:
    kind, rest = (tokens[0], tokens[1:]) if tokens else ("", [])
    if kind in ("conv", "linear"):
        values = reader.ints(rest, offset)
        if len(values) != 2:
            raise ParseError(f"{kind} needs two sizes", offset)
        return Conv(*values) if kind == "conv" else Linear(*values)
    simple = {"relu": ReLU, "maxpool": MaxPool, "flatten": Flatten}
    if kind in simple and not rest:
        return simple[kind]()
    raise ParseError(f"unknown layer line {tokens}", offset)


def load_model(path: Path) -> Model:
    data = Path(path).read_bytes()
    reader = _HeaderReader(data)
    tokens, offset = reader.line()
    if tokens != [FORMAT_MAGIC, str(FORMAT_VERSION)]:
        raise ParseError(f"not a {FORMAT_MAGIC} v{FORMAT_VERSION} weight file", offset)
    arch, offset = reader.keyed("arch")
    if len(arch) != 1:
        raise ParseError("arch line needs one name", offset)
    dims, offset = reader.keyed("input")
    input_shape = tuple(reader.ints(dims, offset))
    labels, _ = reader.keyed("labels")
    count, offset = reader.keyed("layers")
    layer_count = reader.ints(count, offset)
    if len(layer_count) != 1:
        raise ParseError("layers line needs one count", offset)
    layers: List[LayerSpec] = []
    for _ in range(layer_count[0]):
        tokens, offset = reader.line()
        layers.append(_parse_layer(tokens, reader, offset))
    count, offset = reader.keyed("tensors")
    tensor_count = reader.ints(count, offset)
    if len(tensor_count) != 1:
        raise ParseError("tensors line needs one count", offset)
    declared: List[Tuple[str, int, Shape]] = []
    for _ in range(tensor_count[0]):
        tokens, offset = reader.keyed("tensor")
        if len(tokens) < 3:
            raise ParseError("tensor line needs name, length and dims", offset)
        numbers = reader.ints(tokens[1:], offset)
        declared.append((tokens[0], numbers[0], tuple(numbers[1:])))
    end, offset = reader.line()
    if end != ["end"]:
        raise ParseError("expected 'end' line", offset)

    expected: List[Tuple[str, Shape]] = []
    for index, layer in enumerate(layers):
        shapes = param_shapes(layer)
        if shapes is not None:
            expected.append((f"layer{index}.weight", shapes[0]))
            expected.append((f"layer{index}.bias", shapes[1]))
    if [name for name, _, _ in declared] != [name for name, _ in expected]:
        raise ValidationError(
            f"tensor table {[n for n, _, _ in declared]} does not match layers "
            f"{[n for n, _ in expected]}"
        )
    for (name, length, dims), (_, shape) in zip(declared, expected):
        if length != int(np.prod(dims)):
            raise ValidationError(
                f"tensor {name}: declared length {length} but dims {dims} hold {int(np.prod(dims))}"
            )
        if dims != shape:
            raise ValidationError(f"tensor {name}: dims {dims} but layer needs {shape}")

    arrays: Dict[str, np.ndarray] = {}
    pos = reader.pos
    for name, length, dims in declared:
        nbytes = 8 * length
        if pos + nbytes > len(data):
            raise ParseError(f"payload truncated inside tensor {name}", len(data))
        arrays[name] = np.frombuffer(data, dtype="<f8", count=length, offset=pos).reshape(dims)
        pos += nbytes
    if pos != len(data):
        raise ParseError("trailing bytes after payload", pos)

    weights: List[Optional[np.ndarray]] = []
    biases: List[Optional[np.ndarray]] = []
    for index, _ in enumerate(layers):
        weights.append(arrays.get(f"layer{index}.weight"))
        biases.append(arrays.get(f"layer{index}.bias"))
    return Model(arch[0], input_shape, tuple(layers), tuple(weights), tuple(biases),
                 tuple(labels))
