# iqa_forge/model/features.py

"""
Engineered perceptual features standing in for a CNN backbone embedding.

Every implemented feature is a global statistic of a mirror-symmetric filter
response, so an image and its horizontal flip map to the same vector up to
float summation order, whatever the image size.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage, stats

from iqa_forge.distort import LUMA_WEIGHTS
from iqa_forge.imagecore import PixelImage
from iqa_forge.utils.enhanced_errors import DimensionMismatch, ImageTooSmall, IoError

logger = logging.getLogger(__name__)

FEATURE_VERSION = "engineered-v2"
MIN_SIDE = 32
MSCN_SIGMA = 7 / 6
MSCN_RADIUS = 3
MSCN_C = 1.0
BLOCK_PERIOD = 8
BLOCKINESS_EPS = 1e-3
N_RESERVED = 8

FEATURE_NAMES: List[str] = (
    [f"mscn_s{scale}_{stat}" for scale in (1, 2) for stat in ("mean", "var", "skew", "kurtosis")]
    + ["gradient_mean", "gradient_var", "laplacian_var",
       "blockiness_h", "blockiness_v",
       "red_mean", "green_mean", "blue_mean", "red_std", "green_std", "blue_std",
       "saturation_mean", "saturation_std",
       "luma_p5", "luma_p50", "luma_p95",
       "rms_contrast", "colorfulness"]
    + [f"reserved_{i}" for i in range(N_RESERVED)]
)
FEATURE_DIM = len(FEATURE_NAMES)


def _moments(values: np.ndarray) -> List[float]:
    """Mean, variance, skewness and excess kurtosis; higher moments are 0 for a flat response."""
    values = values.ravel()
    variance = float(np.var(values))
    if variance <= 1e-20:
        return [float(np.mean(values)), variance, 0.0, 0.0]
    return [float(np.mean(values)), variance,
            float(stats.skew(values)), float(stats.kurtosis(values))]


def mscn(luminance: np.ndarray) -> np.ndarray:
    """(I - mu) / (sigma + 1) with a 7x7 Gaussian window on the [0, 255] luminance plane."""
    mu = ndimage.gaussian_filter(luminance, MSCN_SIGMA, mode="reflect", radius=MSCN_RADIUS)
    second = ndimage.gaussian_filter(luminance * luminance, MSCN_SIGMA, mode="reflect", radius=MSCN_RADIUS)
    sigma = np.sqrt(np.abs(second - mu * mu))
    return (luminance - mu) / (sigma + MSCN_C)


def _halve(plane: np.ndarray) -> List[np.ndarray]:
    """2x2 box downsampling; an odd side yields one plane per dropped edge so mirrored inputs agree."""
    height, width = (plane.shape[0] // 2) * 2, (plane.shape[1] // 2) * 2
    row_offsets = sorted({0, plane.shape[0] - height})
    col_offsets = sorted({0, plane.shape[1] - width})
    halves = []
    for top in row_offsets:
        for left in col_offsets:
            cropped = plane[top:top + height, left:left + width]
            halves.append(0.25 * (cropped[0::2, 0::2] + cropped[1::2, 0::2]
                                  + cropped[0::2, 1::2] + cropped[1::2, 1::2]))
    return halves


def _blockiness_phase(plane: np.ndarray) -> float:
    steps = np.abs(np.diff(plane, axis=1))
    boundary = (np.arange(steps.shape[1]) + 1) % BLOCK_PERIOD == 0
    across = float(steps[:, boundary].mean()) if boundary.any() else 0.0
    inside = float(steps[:, ~boundary].mean())
    return (across + BLOCKINESS_EPS) / (inside + BLOCKINESS_EPS)


def _blockiness(plane: np.ndarray) -> float:
    """Mean step across 8-pixel block boundaries relative to the mean step inside blocks (along columns).

    The grid is anchored at the left edge and at the right edge and both scores are averaged.
    """
    return 0.5 * (_blockiness_phase(plane) + _blockiness_phase(plane[:, ::-1]))


def extract_features(img: PixelImage) -> np.ndarray:
    """
    Compute the fixed-length feature vector of an image.

    Args:
        img: Image at the model input size, at least 32x32

    Returns:
        float64 array of length FEATURE_DIM
    """
    if img.width < MIN_SIDE or img.height < MIN_SIDE:
        raise ImageTooSmall(f"Feature extraction needs at least {MIN_SIDE}x{MIN_SIDE}, got {img.width}x{img.height}",
                            details={"width": img.width, "height": img.height})

    rgb = img.pixels.astype(np.float64)
    luminance = rgb @ LUMA_WEIGHTS.astype(np.float64)
    unit = luminance / 255.0

    features: List[float] = []
    features += _moments(mscn(luminance))
    features += _moments(np.concatenate([mscn(half).ravel() for half in _halve(luminance)]))

    magnitude = np.hypot(ndimage.sobel(unit, axis=1, mode="reflect"), ndimage.sobel(unit, axis=0, mode="reflect"))
    features += [float(magnitude.mean()), float(magnitude.var())]
    features.append(float(ndimage.laplace(unit, mode="reflect").var()))

    # horizontal then vertical block edges
    features += [_blockiness(luminance), _blockiness(luminance.T)]

    channels = rgb.reshape(-1, 3) / 255.0
    features += [float(v) for v in channels.mean(axis=0)]
    features += [float(v) for v in channels.std(axis=0)]

    high = channels.max(axis=1)
    low = channels.min(axis=1)
    # HSV saturation, 0 for black pixels
    saturation = np.divide(high - low, high, out=np.zeros_like(high), where=high > 0)
    features += [float(saturation.mean()), float(saturation.std())]

    features += [float(v) for v in np.percentile(unit, [5, 50, 95])]
    features.append(float(unit.std()))

    # Hasler-Suesstrunk colourfulness
    red, green, blue = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    rg = red - green
    yb = 0.5 * (red + green) - blue
    colorfulness = np.hypot(rg.std(), yb.std()) + 0.3 * np.hypot(rg.mean(), yb.mean())
    features.append(float(colorfulness) / 255.0)

    features += [0.0] * N_RESERVED
    return np.asarray(features, dtype=np.float64)


class FeatureScaler:
    """Z-score normalisation fitted on training features; zero std is replaced by 1."""

    def __init__(self, mean: Optional[np.ndarray] = None, std: Optional[np.ndarray] = None):
        self.mean_ = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.std_ = None if std is None else np.asarray(std, dtype=np.float64)

    def fit(self, features: np.ndarray) -> "FeatureScaler":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != FEATURE_DIM or features.shape[0] == 0:
            raise DimensionMismatch(f"Scaler needs an (n, {FEATURE_DIM}) matrix, got {features.shape}")
        self.mean_ = features.mean(axis=0)
        std = features.std(axis=0)
        self.std_ = np.where(std > 0, std, 1.0)
        return self

    def transform(self, features: np.ndarray) -> np.ndarray:
        if self.mean_ is None:
            raise DimensionMismatch("FeatureScaler.transform called before fit")
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.mean_.shape[0]:
            raise DimensionMismatch(f"Expected {self.mean_.shape[0]} features, got {features.shape[-1]}")
        return (features - self.mean_) / self.std_

    def fit_transform(self, features: np.ndarray) -> np.ndarray:
        return self.fit(features).transform(features)

    @classmethod
    def identity(cls, dim: int = FEATURE_DIM) -> "FeatureScaler":
        return cls(np.zeros(dim), np.ones(dim))


class FeatureCache:
    """Evaluation-time features keyed by image path, input size and extractor version."""

    def __init__(self, directory: Optional[Union[str, Path]] = None):
        self.directory = Path(directory) if directory is not None else None
        self.entries: Dict[str, np.ndarray] = {}
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(path: Union[str, Path], input_size: int) -> str:
        key_string = json.dumps({"path": str(path), "input_size": input_size, "version": FEATURE_VERSION},
                                sort_keys=True)
        return hashlib.md5(key_string.encode()).hexdigest()

    def get(self, path: Union[str, Path], input_size: int) -> Optional[np.ndarray]:
        cache_key = self.key(path, input_size)
        if cache_key in self.entries:
            self.hits += 1
            return self.entries[cache_key]
        if self.directory is not None:
            stored = self.directory / f"{cache_key}.npy"
            if stored.exists():
                self.entries[cache_key] = np.load(stored)
                self.hits += 1
                return self.entries[cache_key]
        self.misses += 1
        return None

    def put(self, path: Union[str, Path], input_size: int, features: np.ndarray) -> None:
        cache_key = self.key(path, input_size)
        self.entries[cache_key] = features
        if self.directory is not None:
            try:
                self.directory.mkdir(parents=True, exist_ok=True)
                np.save(self.directory / f"{cache_key}.npy", features)
            except OSError as e:
                raise IoError(f"Cannot write feature cache {self.directory}: {e}", path=self.directory,
                              original_exception=e)


def feature_matrix(vectors: Sequence[np.ndarray]) -> np.ndarray:
    if not vectors:
        return np.zeros((0, FEATURE_DIM))
    return np.vstack(vectors)
