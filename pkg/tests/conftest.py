# tests/conftest.py

from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import pytest

from iqa_forge.datasets import (
    DatasetDescriptor,
    DistortionType,
    ImageRecord,
    SplitPolicy,
    harmonize_records,
    load_descriptors,
    load_manifest,
    make_splits,
)
from iqa_forge.imagecore import PixelImage
from iqa_forge.synthetic import build_synthetic_domain, texture_image


def make_records(source: str, n_subjects: int, views: int = 1,
                 mos: Optional[Callable[[int, int], float]] = None) -> List[ImageRecord]:
    """In-memory records: ``views`` images per subject, MOS from ``mos(subject, view)``."""
    mos = mos or (lambda subject, view: 1.0 + (subject * 7 + view * 3) % 10 * 0.9)
    records = []
    for subject in range(n_subjects):
        for view in range(views):
            records.append(ImageRecord(id=f"{source}-{subject:03d}-{view:02d}",
                                       subject_id=f"{source}-{subject:03d}",
                                       path=Path(f"/data/{source}/{subject:03d}_{view:02d}.png"),
                                       source=source, mos=mos(subject, view), native_range=(1.0, 10.0)))
    return records


def descriptor(name: str, policy: SplitPolicy = SplitPolicy.FULL) -> DatasetDescriptor:
    return DatasetDescriptor(name, (1.0, 10.0), DistortionType.ARTIFICIAL, policy)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def textured_image():
    return texture_image(64, np.random.default_rng(7))


@pytest.fixture
def checker_image():
    yy, xx = np.mgrid[0:64, 0:64]
    plane = np.where(((yy // 4) + (xx // 4)) % 2 == 0, 40, 215).astype(np.uint8)
    return PixelImage(np.repeat(plane[:, :, None], 3, axis=2))


@pytest.fixture
def gray_image():
    return PixelImage(np.full((48, 48, 3), 128, dtype=np.uint8))


@pytest.fixture(scope="session")
def tiny_domains(tmp_path_factory):
    """Two small scored synthetic domains on disk (4 subjects x 19 images each)."""
    root = tmp_path_factory.mktemp("domains")
    texture = build_synthetic_domain("tex", "texture", 4, 40, root / "tex", seed=11)
    shapes = build_synthetic_domain("shp", "shapes", 4, 40, root / "shp", seed=12)
    return texture, shapes


@pytest.fixture(scope="session")
def tiny_corpus(tiny_domains):
    """Harmonized records of both tiny domains plus a 2-repetition split plan."""
    descriptors = load_descriptors([d.descriptor_path for d in tiny_domains])
    records = []
    for domain in tiny_domains:
        records.extend(harmonize_records(load_manifest(domain.manifest_path), descriptors))
    plan = make_splits(records, descriptors, n_repetitions=2, seed=5)
    return records, plan, descriptors
