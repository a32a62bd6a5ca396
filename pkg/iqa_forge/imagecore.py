# iqa_forge/imagecore.py

"""
Pixel-level primitives shared by every other module.

All operations are pure: they never mutate their input and, given the same
arguments (and the same rng state for ``random_crop``), return bit-identical
results. Pixel arithmetic runs in float32 and is rounded half-to-even back to
8 bits at each operation boundary.
"""

import io
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import PIL
from PIL import Image, UnidentifiedImageError, features

from iqa_forge.utils.enhanced_errors import (
    CropLargerThanImage,
    InvalidDimensions,
    IoError,
    MalformedFile,
    QualityOutOfRange,
    UnsupportedFormat,
)

logger = logging.getLogger(__name__)


class ImageFormat(str, Enum):
    PNG = "PNG"
    JPEG = "JPEG"


_EXTENSIONS = {
    ".png": ImageFormat.PNG,
    ".jpg": ImageFormat.JPEG,
    ".jpeg": ImageFormat.JPEG,
}


@dataclass(frozen=True, eq=False)
class PixelImage:
    """Decoded 8-bit sRGB raster stored as a (height, width, 3) uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = self.pixels
        if not isinstance(pixels, np.ndarray) or pixels.ndim != 3 or pixels.shape[2] != 3:
            raise InvalidDimensions(
                f"Pixel array must have shape (height, width, 3), got {getattr(pixels, 'shape', None)}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise InvalidDimensions(f"Image must be at least 1x1, got {pixels.shape[1]}x{pixels.shape[0]}")
        if pixels.dtype != np.uint8:
            if pixels.min() < 0 or pixels.max() > 255:
                raise InvalidDimensions("Channel values must lie in [0, 255]")
            object.__setattr__(self, "pixels", pixels.astype(np.uint8))
        self.pixels.setflags(write=False)

    @classmethod
    def from_buffer(cls, width: int, height: int, buffer) -> "PixelImage":
        """Build an image from a row-major flat buffer of width*height*3 values."""
        data = np.asarray(buffer)
        if data.size != width * height * 3:
            raise InvalidDimensions(
                f"Buffer holds {data.size} values, expected {width * height * 3} for {width}x{height}")
        return cls(data.reshape(height, width, 3))

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    def to_float(self) -> np.ndarray:
        return self.pixels.astype(np.float32)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PixelImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    def __repr__(self) -> str:
        return f"PixelImage({self.width}x{self.height})"


def to_uint8(values: np.ndarray) -> PixelImage:
    """Round half-to-even, clamp to [0, 255] and wrap as a PixelImage."""
    return PixelImage(np.clip(np.rint(values), 0, 255).astype(np.uint8))


def _coerce_format(fmt: Union[str, ImageFormat]) -> ImageFormat:
    try:
        return ImageFormat(str(fmt.value if isinstance(fmt, ImageFormat) else fmt).upper())
    except ValueError:
        raise UnsupportedFormat(f"Unsupported image format '{fmt}'", details={"format": str(fmt)})


def codec_info() -> Dict[str, Optional[str]]:
    """Codec identification recorded next to generated datasets (JPEG bytes are codec-dependent)."""
    return {
        "codec": "Pillow",
        "pillow_version": PIL.__version__,
        "libjpeg_version": features.version("jpg"),
        "zlib_version": features.version("zlib"),
    }


def decode(data: bytes, fmt: Union[str, ImageFormat]) -> PixelImage:
    """Decode PNG or baseline JPEG bytes into an RGB raster."""
    fmt = _coerce_format(fmt)
    try:
        with Image.open(io.BytesIO(data)) as handle:
            handle.load()
            actual = handle.format
            rgb = handle.convert("RGB")
    except (UnidentifiedImageError, OSError, ValueError, SyntaxError) as e:
        raise MalformedFile(f"Could not decode {fmt.value} data ({len(data)} bytes): {e}",
                            details={"format": fmt.value, "n_bytes": len(data)},
                            original_exception=e)
    if actual != fmt.value:
        raise MalformedFile(f"Data is {actual}, not {fmt.value}",
                            details={"format": fmt.value, "detected": actual})
    return PixelImage(np.array(rgb, dtype=np.uint8))


def encode(img: PixelImage, fmt: Union[str, ImageFormat], quality: Optional[int] = None) -> bytes:
    """Encode to PNG (quality ignored) or baseline JPEG at ``quality`` in 1-100."""
    fmt = _coerce_format(fmt)
    buffer = io.BytesIO()
    pil_image = Image.fromarray(np.ascontiguousarray(img.pixels), mode="RGB")
    if fmt is ImageFormat.JPEG:
        if quality is None or isinstance(quality, bool) or int(quality) != quality or not 1 <= quality <= 100:
            raise QualityOutOfRange(f"JPEG quality must be an integer in 1-100, got {quality}",
                                    details={"quality": quality})
        pil_image.save(buffer, format="JPEG", quality=int(quality), optimize=False, progressive=False)
    else:
        pil_image.save(buffer, format="PNG", compress_level=6)
    return buffer.getvalue()


def format_for_path(path: Union[str, Path]) -> ImageFormat:
    suffix = Path(path).suffix.lower()
    if suffix not in _EXTENSIONS:
        raise UnsupportedFormat(f"Cannot infer image format from extension '{suffix}' of {path}",
                                details={"path": str(path)})
    return _EXTENSIONS[suffix]


def load_image(path: Union[str, Path]) -> PixelImage:
    fmt = format_for_path(path)
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"Cannot read image {path}: {e}", path=path, original_exception=e)
    return decode(data, fmt)


def save_image(img: PixelImage, path: Union[str, Path], quality: int = 95) -> None:
    fmt = format_for_path(path)
    data = encode(img, fmt, quality if fmt is ImageFormat.JPEG else None)
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise IoError(f"Cannot write image {path}: {e}", path=path, original_exception=e)


def _sample_positions(n_in: int, n_out: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centers: source = (dst + 0.5) * n_in / n_out - 0.5, clamped to the edge
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    coords = np.clip(coords, 0.0, n_in - 1)
    lower = np.floor(coords).astype(np.intp)
    upper = np.minimum(lower + 1, n_in - 1)
    frac = (coords - lower).astype(np.float32)
    return lower, upper, frac


def resize_bilinear(img: PixelImage, new_width: int, new_height: int) -> PixelImage:
    """Bilinear resampling with the half-pixel-center convention (no antialiasing)."""
    if new_width < 1 or new_height < 1:
        raise InvalidDimensions(f"Target size must be at least 1x1, got {new_width}x{new_height}",
                                details={"width": new_width, "height": new_height})
    if (new_width, new_height) == img.size:
        return img

    src = img.to_float()
    y0, y1, fy = _sample_positions(img.height, new_height)
    x0, x1, fx = _sample_positions(img.width, new_width)

    # separable: rows first, then columns
    top = src[y0]
    rows = top + (src[y1] - top) * fy[:, None, None]
    left = rows[:, x0]
    out = left + (rows[:, x1] - left) * fx[None, :, None]
    return to_uint8(out)


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def resize_shorter_side(img: PixelImage, target: int) -> PixelImage:
    """Scale so the shorter side equals ``target``, preserving aspect ratio."""
    if img.width <= img.height:
        new_w, new_h = target, max(1, _round_half_up(img.height * target / img.width))
    else:
        new_w, new_h = max(1, _round_half_up(img.width * target / img.height)), target
    return resize_bilinear(img, new_w, new_h)


def resize_largest_side(img: PixelImage, target: int = 512) -> PixelImage:
    """Scale so the longer side equals ``target`` (annotation-time preprocessing)."""
    if img.width >= img.height:
        new_w, new_h = target, max(1, _round_half_up(img.height * target / img.width))
    else:
        new_w, new_h = max(1, _round_half_up(img.width * target / img.height)), target
    return resize_bilinear(img, new_w, new_h)


def _check_crop(img: PixelImage, crop_width: int, crop_height: int) -> None:
    if crop_width < 1 or crop_height < 1:
        raise InvalidDimensions(f"Crop size must be at least 1x1, got {crop_width}x{crop_height}")
    if crop_width > img.width or crop_height > img.height:
        raise CropLargerThanImage(
            f"Crop {crop_width}x{crop_height} does not fit in {img.width}x{img.height}",
            details={"crop": [crop_width, crop_height], "image": [img.width, img.height]})


def _window(img: PixelImage, left: int, top: int, width: int, height: int) -> PixelImage:
    return PixelImage(img.pixels[top:top + height, left:left + width].copy())


def center_crop(img: PixelImage, crop_width: int, crop_height: int) -> PixelImage:
    """Centered window; odd remainders are resolved toward the top-left."""
    _check_crop(img, crop_width, crop_height)
    # floor division: the extra pixel of an odd margin goes to the right and bottom
    left = (img.width - crop_width) // 2
    top = (img.height - crop_height) // 2
    return _window(img, left, top, crop_width, crop_height)


def random_crop(img: PixelImage, crop_width: int, crop_height: int,
                rng: np.random.Generator) -> PixelImage:
    """Window at an offset drawn uniformly from all valid positions."""
    _check_crop(img, crop_width, crop_height)
    # row offset is drawn first; keep this order for reproducible crops
    top = int(rng.integers(0, img.height - crop_height + 1))
    left = int(rng.integers(0, img.width - crop_width + 1))
    return _window(img, left, top, crop_width, crop_height)


def hflip(img: PixelImage) -> PixelImage:
    return PixelImage(img.pixels[:, ::-1].copy())
