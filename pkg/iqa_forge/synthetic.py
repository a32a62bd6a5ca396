# iqa_forge/synthetic.py

"""
Procedural fixture domains with pseudo-MOS.

Two visually distinct domains are available: band-limited colour textures and
smooth gradients with flat geometric shapes. Distorted views get a pseudo-MOS
that falls linearly with the distortion level, plus Gaussian noise.
"""

import logging
import zlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from iqa_forge.datasets import (
    DatasetDescriptor,
    DistortionType,
    ImageRecord,
    SplitPolicy,
    write_descriptors,
    write_manifest,
    write_ratings,
)
from iqa_forge.distort import DistortionLadder, generate_dataset
from iqa_forge.imagecore import PixelImage, save_image, to_uint8
from iqa_forge.utils.enhanced_errors import IoError, ValidationError

logger = logging.getLogger(__name__)

# Textures stay inside [64, 192] so contrast factors up to 2 never clip.
TEXTURE_RANGE = (64.0, 192.0)
MOS_INTERCEPT = 9.0
MOS_SLOPE = 1.6
MOS_NOISE = 0.3
OBSERVER_NOISE = 1.0


class DomainKind(str, Enum):
    TEXTURE = "texture"
    SHAPES = "shapes"


def _domain_code(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def texture_image(size: int, rng: np.random.Generator) -> PixelImage:
    """Sum of oriented sinusoids per channel plus mild noise."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    channels = []
    for _ in range(3):
        layer = np.full((size, size), rng.uniform(100.0, 156.0))
        for _ in range(4):
            angle = rng.uniform(0.0, np.pi)
            frequency = rng.uniform(2.0, 14.0)
            layer += rng.uniform(5.0, 12.0) * np.sin(
                2 * np.pi * frequency * (xx * np.cos(angle) + yy * np.sin(angle)) + rng.uniform(0.0, 2 * np.pi))
        layer += rng.normal(0.0, 4.0, size=(size, size))
        channels.append(layer)
    return to_uint8(np.clip(np.stack(channels, axis=-1), *TEXTURE_RANGE))


def shapes_image(size: int, rng: np.random.Generator) -> PixelImage:
    """Linear colour gradient with flat rectangles and ellipses on top."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    angle = rng.uniform(0.0, 2 * np.pi)
    ramp = (xx * np.cos(angle) + yy * np.sin(angle))
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    start, end = rng.uniform(0, 255, size=3), rng.uniform(0, 255, size=3)
    canvas = start + ramp[..., None] * (end - start)

    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0, 255, size=3)
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        ry, rx = rng.uniform(0.05, 0.25, size=2)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        canvas[mask] = color
    canvas += rng.normal(0.0, 1.5, size=canvas.shape)
    return to_uint8(canvas)


GENERATORS = {
    DomainKind.TEXTURE: texture_image,
    DomainKind.SHAPES: shapes_image,
}


def generate_pristine(kind: Union[str, DomainKind], n_images: int, size: int, seed: int) -> List[PixelImage]:
    kind = DomainKind(kind)
    # one rng stream per (seed, domain, image)
    return [GENERATORS[kind](size, np.random.default_rng([seed, _domain_code(kind.value), index]))
            for index in range(n_images)]


def pseudo_mos(rank: int, rng: np.random.Generator) -> float:
    """clip(9 - 1.6 * rank + N(0, 0.3), 1, 10); rank 0 is the pristine image."""
    return float(np.clip(MOS_INTERCEPT - MOS_SLOPE * rank + rng.normal(0.0, MOS_NOISE), 1.0, 10.0))


def observer_ratings(mos: float, n_observers: int, rng: np.random.Generator) -> List[int]:
    # integer votes on the 1-10 scale
    noisy = np.rint(mos + rng.normal(0.0, OBSERVER_NOISE, size=n_observers))
    return [int(v) for v in np.clip(noisy, 1, 10)]


@dataclass
class SyntheticDomain:
    descriptor: DatasetDescriptor
    records: List[ImageRecord]
    manifest_path: Path
    descriptor_path: Path
    ratings_path: Optional[Path] = None
    failures: Optional[List[Dict]] = None


def build_synthetic_domain(name: str, kind: Union[str, DomainKind], n_pristine: int, size: int,
                           output_directory: Union[str, Path], seed: int,
                           ladder: Optional[DistortionLadder] = None,
                           split_policy: SplitPolicy = SplitPolicy.FULL,
                           n_observers: int = 0, jobs: int = 1) -> SyntheticDomain:
    """
    Write pristine images, their distorted views, a scored manifest and a descriptor file.

    Args:
        name: Dataset name recorded as the source of every record
        kind: Image generator to use
        n_pristine: Number of pristine images (subjects)
        size: Side length of the square pristine images
        output_directory: Destination directory
        seed: Seed for image content and pseudo-MOS noise
        ladder: Distortion ladder, default ladder when omitted
        split_policy: Policy recorded in the descriptor
        n_observers: When > 0, also write per-observer integer ratings

    Returns:
        SyntheticDomain describing everything that was written
    """
    if n_pristine < 1 or size < 1:
        raise ValidationError(f"Need at least one pristine image of positive size, got {n_pristine} x {size}",
                              code="DATASET_INVALID_SYNTHETIC")
    kind = DomainKind(kind)
    ladder = ladder if ladder is not None else DistortionLadder.default()
    output_directory = Path(output_directory)
    pristine_directory = output_directory / "pristine"
    try:
        pristine_directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"Cannot create {pristine_directory}: {e}", path=pristine_directory, original_exception=e)

    pristine: List[ImageRecord] = []
    for index, img in enumerate(generate_pristine(kind, n_pristine, size, seed)):
        image_id = f"{name}_{index:03d}"
        path = pristine_directory / f"{image_id}.png"
        save_image(img, path)
        pristine.append(ImageRecord(id=image_id, subject_id=image_id, path=path, source=name))

    generated = generate_dataset(pristine, ladder, output_directory / "views",
                                 manifest_name="unscored_manifest.csv", jobs=jobs)

    rng = np.random.default_rng([seed, _domain_code(name), 1])
    scored: List[ImageRecord] = []
    ratings: Dict[str, List[Tuple[str, int]]] = {}
    for record in generated.records:
        mos = pseudo_mos(record.severity_rank, rng)
        scored.append(ImageRecord(id=record.id, subject_id=record.subject_id, path=record.path,
                                  source=name, mos=mos, native_range=(1.0, 10.0),
                                  family=record.family, level=record.level))
        if n_observers > 0:
            ratings[record.id] = [(f"obs{k:02d}", r) for k, r in
                                  enumerate(observer_ratings(mos, n_observers, rng))]

    descriptor = DatasetDescriptor(name, (1.0, 10.0), DistortionType.ARTIFICIAL, split_policy)
    manifest_path = output_directory / "manifest.csv"
    descriptor_path = output_directory / "descriptor.json"
    write_manifest(scored, manifest_path)
    write_descriptors([descriptor], descriptor_path)
    ratings_path = None
    if n_observers > 0:
        ratings_path = output_directory / "ratings.csv"
        write_ratings(ratings, ratings_path)

    logger.info(f"Built synthetic {kind.value} domain '{name}': {len(scored)} images in {output_directory}")
    return SyntheticDomain(descriptor=descriptor, records=scored, manifest_path=manifest_path,
                           descriptor_path=descriptor_path, ratings_path=ratings_path,
                           failures=generated.failures)
