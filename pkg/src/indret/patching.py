"""Image loading and rigid-grid patch decomposition."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigError, IngestError
from .ndtensor import rescale_nd


@dataclass(frozen=True)
class Image:
    """Pixels as an ``(height, width, channels)`` array in [0, 1]."""

    pixels: np.ndarray

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def to_gray(self) -> "Image":
        if self.channels == 1:
            return self
        w = np.array([0.299, 0.587, 0.114])
        return Image((self.pixels @ w)[..., None])


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ConfigError(f"grid must be at least 2x2, got {self.rows}x{self.cols}")

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        try:
            m, n = text.lower().split("x")
            return cls(int(m), int(n))
        except ValueError:
            raise ConfigError(f"grid must look like MxN, got {text!r}") from None

    def __str__(self):
        return f"{self.rows}x{self.cols}"


@dataclass(frozen=True)
class PatchGrid:
    """``patches[i, j]`` is the flattened (row-major) pixel vector of cell (i, j)."""

    spec: GridSpec
    patches: np.ndarray

    @property
    def patch_length(self) -> int:
        return self.patches.shape[-1]

    def flat(self) -> np.ndarray:
        return self.patches.reshape(self.spec.rows * self.spec.cols, -1)


def image_from_array(pixels) -> Image:
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 2:
        px = px[..., None]
    if px.ndim != 3 or px.shape[2] not in (1, 3):
        raise IngestError(f"expected HxW, HxWx1 or HxWx3 pixels, got {px.shape}")
    if px.size and (px.min() < 0.0 or px.max() > 1.0):
        raise IngestError("pixel values must lie in [0, 1]")
    return Image(px)


def load_image(path) -> Image:
    """Decode PNG or binary PPM/PGM into an :class:`Image`."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode in ("L", "RGB"):
                arr = np.asarray(im)
            elif im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64)
                return image_from_array(arr / 65535.0)
            elif im.mode in ("1", "LA", "P", "PA"):
                arr = np.asarray(im.convert("RGB" if im.mode.startswith("P") else "L"))
            else:
                arr = np.asarray(im.convert("RGB"))
    except (OSError, SyntaxError, ValueError) as exc:
        raise IngestError(f"cannot decode {path}: {exc}") from None
    return image_from_array(arr.astype(np.float64) / 255.0)


def save_image(path, img: Image | np.ndarray) -> None:
    px = img.pixels if isinstance(img, Image) else np.asarray(img)
    if px.ndim == 3 and px.shape[2] == 1:
        px = px[..., 0]
    data = np.clip(np.rint(px * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(data).save(path)


def resize(img: Image, height: int, width: int) -> Image:
    """Bilinear, edge-clamped resize."""
    px = rescale_nd(img.pixels, (height, width, img.channels))
    return Image(np.clip(px, 0.0, 1.0))


def decompose(img: Image, spec: GridSpec, target_side: int = 224, gray: bool = False) -> PatchGrid:
    if target_side % spec.rows or target_side % spec.cols:
        raise ConfigError(f"side {target_side} is not divisible by grid {spec}")
    if gray:
        img = img.to_gray()
    if img.height != target_side or img.width != target_side:
        img = resize(img, target_side, target_side)
    ph, pw = target_side // spec.rows, target_side // spec.cols
    c = img.channels
    cells = img.pixels.reshape(spec.rows, ph, spec.cols, pw, c).transpose(0, 2, 1, 3, 4)
    return PatchGrid(spec, np.ascontiguousarray(cells).reshape(spec.rows, spec.cols, ph * pw * c))


def reassemble(grid: PatchGrid, target_side: int, channels: int) -> np.ndarray:
    """Inverse of :func:`decompose` on an already-resized image."""
    m, n = grid.spec.rows, grid.spec.cols
    ph, pw = target_side // m, target_side // n
    cells = grid.patches.reshape(m, n, ph, pw, channels).transpose(0, 2, 1, 3, 4)
    return cells.reshape(target_side, target_side, channels)
