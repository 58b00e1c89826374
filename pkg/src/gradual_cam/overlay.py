from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, ShapeError

COLORMAPS = ("heat",)


@dataclass(frozen=True, eq=False)
class OverlaySpec:
    image: np.ndarray
    saliency: np.ndarray
    blend: float = 0.5
    colormap: str = "heat"

    def validate(self) -> None:
        if np.shape(self.image)[-2:] != np.shape(self.saliency):
            raise ShapeError(
                f"saliency {np.shape(self.saliency)} does not match image {np.shape(self.image)}"
            )
        if not 0.0 <= self.blend <= 1.0:
            raise InvalidArgumentError(f"blend {self.blend} outside [0, 1]")
        if self.colormap not in COLORMAPS:
            raise InvalidArgumentError(f"unknown colormap '{self.colormap}'")


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Black through red and yellow to white, returned as 3xHxW."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.clip(3.0 * v - shift, 0.0, 1.0) for shift in (0.0, 1.0, 2.0)])


def render_overlay(spec: OverlaySpec) -> np.ndarray:
    spec.validate()
    image = np.asarray(spec.image, dtype=np.float64)
    if image.ndim == 3:
        if image.shape[0] != 1:
            raise ShapeError(f"overlay needs a single-channel image, got {image.shape}")
        image = image[0]
    gray = np.clip(image, 0.0, 1.0)[None].repeat(3, axis=0)
    heat = heat_colormap(spec.saliency)
    return np.clip((1.0 - spec.blend) * gray + spec.blend * heat, 0.0, 1.0)
