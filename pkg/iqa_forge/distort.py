# iqa_forge/distort.py

"""
Artificial distortion ladder and dataset expansion.

Each pristine image is expanded into one view per ladder entry. Every family is
deterministic, so running the expansion twice yields byte-identical PNGs.
"""

import json
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy import ndimage

from iqa_forge import __version__
from iqa_forge.datasets import ImageRecord, write_manifest
from iqa_forge.imagecore import (
    ImageFormat,
    PixelImage,
    codec_info,
    decode,
    encode,
    load_image,
    resize_largest_side,
    save_image,
    to_uint8,
)
from iqa_forge.utils.enhanced_errors import (
    DuplicateId,
    IQAForgeError,
    InvalidSpec,
    IoError,
    LadderFormatError,
    format_error_for_response,
)

logger = logging.getLogger(__name__)

# ITU-R BT.601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)
SHARPEN_SIGMA = 1.5
MID_GRAY = 128.0


class Family(str, Enum):
    JPEG_COMPRESSION = "jpeg_compression"
    GAUSSIAN_BLUR = "gaussian_blur"
    PIXELATION = "pixelation"
    SHARPEN = "sharpen"
    BRIGHTNESS = "brightness"
    COLOR = "color"
    CONTRAST = "contrast"

    @classmethod
    def parse(cls, text: str) -> "Family":
        """Accept 'jpeg_compression', 'JpegCompression' or 'JPEG_COMPRESSION'."""
        key = re.sub(r"[^a-z]", "", str(text).lower())
        for member in cls:
            if member.value.replace("_", "") == key:
                return member
        raise InvalidSpec(f"Unknown distortion family '{text}'",
                          details={"family": text},
                          suggestions=[f"Use one of: {', '.join(m.value for m in cls)}"])


# Frozen default ladder: family -> parameters in level order (levels are 1-based).
DEFAULT_LADDER_PARAMETERS: Dict[Family, Tuple[float, ...]] = {
    Family.JPEG_COMPRESSION: (40, 20, 7),
    Family.GAUSSIAN_BLUR: (3.0,),
    Family.PIXELATION: (8, 16),
    Family.SHARPEN: (1.0, 2.0, 4.0),
    Family.BRIGHTNESS: (1.4, 1.8, 0.7, 0.4),
    Family.COLOR: (0.4, 0.1),
    Family.CONTRAST: (0.5, 1.8, 0.3),
}


def _is_integral(value: float) -> bool:
    return float(value).is_integer()


@dataclass(frozen=True)
class DistortionSpec:
    family: Family
    level: int
    parameter: float

    def __post_init__(self):
        if not isinstance(self.family, Family):
            object.__setattr__(self, "family", Family.parse(self.family))
        if isinstance(self.level, bool) or int(self.level) != self.level or self.level < 1:
            raise InvalidSpec(f"Level must be a positive integer, got {self.level}",
                              details={"family": self.family.value, "level": self.level})
        object.__setattr__(self, "level", int(self.level))
        try:
            parameter = float(self.parameter)
        except (TypeError, ValueError):
            raise InvalidSpec(f"Parameter '{self.parameter}' is not a number",
                              details={"family": self.family.value})
        if not math.isfinite(parameter):
            raise InvalidSpec(f"Parameter must be finite, got {parameter}",
                              details={"family": self.family.value})
        object.__setattr__(self, "parameter", parameter)
        self._check_parameter()

    def _check_parameter(self):
        p = self.parameter
        family = self.family
        if family is Family.JPEG_COMPRESSION:
            ok = _is_integral(p) and 1 <= p <= 100
            expected = "an integer quality in 1-100"
        elif family is Family.PIXELATION:
            ok = _is_integral(p) and p >= 1
            expected = "an integer block factor >= 1"
        elif family is Family.GAUSSIAN_BLUR:
            ok = p > 0
            expected = "a positive sigma"
        else:
            ok = p >= 0
            expected = "a non-negative factor"
        if not ok:
            raise InvalidSpec(f"{family.value} parameter must be {expected}, got {p}",
                              details={"family": family.value, "level": self.level, "parameter": p})

    @property
    def tag(self) -> str:
        return f"{self.family.value}_{self.level}"

    @classmethod
    def from_default(cls, family: Union[str, Family], level: int) -> "DistortionSpec":
        family = family if isinstance(family, Family) else Family.parse(family)
        parameters = DEFAULT_LADDER_PARAMETERS[family]
        if not 1 <= level <= len(parameters):
            raise InvalidSpec(f"{family.value} has {len(parameters)} default level(s), got level {level}",
                              details={"family": family.value, "level": level})
        return cls(family, level, parameters[level - 1])

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.family.value, "level": self.level, "parameter": self.parameter}


@dataclass
class DistortionLadder:
    """Ordered distortion specs; levels of each family run 1..n without gaps."""

    specs: List[DistortionSpec] = field(default_factory=list)

    def __post_init__(self):
        self.specs = list(self.specs)
        problem = _ladder_problem(self.specs)
        if problem is not None:
            raise InvalidSpec(problem[1], details={"index": problem[0]})

    def __len__(self) -> int:
        return len(self.specs)

    def __iter__(self) -> Iterator[DistortionSpec]:
        return iter(self.specs)

    def family_counts(self) -> Dict[Family, int]:
        counts: Dict[Family, int] = {}
        for spec in self.specs:
            counts[spec.family] = counts.get(spec.family, 0) + 1
        return counts

    def to_rows(self) -> List[Dict[str, Any]]:
        return [spec.to_dict() for spec in self.specs]

    @classmethod
    def default(cls) -> "DistortionLadder":
        return cls([DistortionSpec(family, level, parameter)
                    for family, parameters in DEFAULT_LADDER_PARAMETERS.items()
                    for level, parameter in enumerate(parameters, 1)])


def _ladder_problem(specs: List[DistortionSpec]) -> Optional[Tuple[int, str]]:
    """First (index, message) where a family's levels stop running 1, 2, 3, ..."""
    next_level: Dict[Family, int] = {}
    for index, spec in enumerate(specs):
        expected = next_level.get(spec.family, 1)
        if spec.level != expected:
            return index, f"{spec.family.value} level {spec.level} out of order, expected level {expected}"
        next_level[spec.family] = expected + 1
    return None


LADDER_HEADER = ["family", "level", "parameter"]


def parse_ladder_file(path: Union[str, Path]) -> DistortionLadder:
    """
    Read a ladder CSV of ``family,level,parameter`` lines.

    A header line, blank lines and ``#`` comments are skipped. Any malformed line
    raises LadderFormatError carrying its 1-based line number.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot read ladder file {path}: {e}", path=path, original_exception=e)

    specs: List[DistortionSpec] = []
    line_numbers: List[int] = []
    for line_number, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cells = [c.strip() for c in line.split(",")]
        if [c.lower() for c in cells] == LADDER_HEADER:
            continue
        if len(cells) != 3:
            raise LadderFormatError(f"Expected 3 fields (family,level,parameter), found {len(cells)}: '{line}'",
                                    line_number=line_number)
        family, level, parameter = cells
        try:
            level_value = int(level)
        except ValueError:
            raise LadderFormatError(f"Level '{level}' is not an integer", line_number=line_number)
        try:
            specs.append(DistortionSpec(Family.parse(family), level_value, float(parameter)))
        except ValueError:
            raise LadderFormatError(f"Parameter '{parameter}' is not a number", line_number=line_number)
        except InvalidSpec as e:
            raise LadderFormatError(e.message, line_number=line_number, original_exception=e)
        line_numbers.append(line_number)

    problem = _ladder_problem(specs)
    if problem is not None:
        raise LadderFormatError(problem[1], line_number=line_numbers[problem[0]])
    logger.info(f"Loaded ladder with {len(specs)} entries from {path}")
    return DistortionLadder(specs)


def _gaussian_blur(values: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(values, sigma=(sigma, sigma, 0), mode="reflect",
                                   radius=(int(math.ceil(3 * sigma)), int(math.ceil(3 * sigma)), 0))


def _pixelate(values: np.ndarray, block: int) -> np.ndarray:
    height, width = values.shape[:2]
    row_starts = np.arange(0, height, block)
    col_starts = np.arange(0, width, block)
    row_sizes = np.diff(np.append(row_starts, height))
    col_sizes = np.diff(np.append(col_starts, width))
    # partial blocks at the right/bottom edge average over their actual size
    sums = np.add.reduceat(np.add.reduceat(values.astype(np.float64), row_starts, axis=0), col_starts, axis=1)
    means = sums / np.outer(row_sizes, col_sizes)[:, :, None]
    return np.repeat(np.repeat(means, row_sizes, axis=0), col_sizes, axis=1)


def luma(values: np.ndarray) -> np.ndarray:
    return values @ LUMA_WEIGHTS


def apply(img: PixelImage, spec: DistortionSpec) -> PixelImage:
    """Apply one distortion; output dimensions always equal input dimensions."""
    if not isinstance(spec, DistortionSpec):
        raise InvalidSpec(f"Expected a DistortionSpec, got {type(spec).__name__}")
    family, p = spec.family, spec.parameter

    if family is Family.JPEG_COMPRESSION:
        # round-trip through the real codec, not a DCT imitation
        return decode(encode(img, ImageFormat.JPEG, int(p)), ImageFormat.JPEG)

    values = img.to_float()
    if family is Family.GAUSSIAN_BLUR:
        out = _gaussian_blur(values, p)
    elif family is Family.PIXELATION:
        out = _pixelate(values, int(p))
    elif family is Family.SHARPEN:
        # unsharp mask
        out = values + np.float32(p) * (values - _gaussian_blur(values, SHARPEN_SIGMA))
    elif family is Family.BRIGHTNESS:
        out = np.float32(p) * values
    elif family is Family.COLOR:
        y = luma(values)[:, :, None]
        out = y + np.float32(p) * (values - y)
    elif family is Family.CONTRAST:
        out = MID_GRAY + np.float32(p) * (values - MID_GRAY)
    else:
        raise InvalidSpec(f"Unhandled distortion family {family}")
    return to_uint8(out)  # clamp + round half-to-even


def expand_pristine(img: PixelImage, ladder: DistortionLadder) -> List[Tuple[DistortionSpec, PixelImage]]:
    return [(spec, apply(img, spec)) for spec in ladder]


@dataclass
class GenerationResult:
    records: List[ImageRecord]
    failures: List[Dict[str, Any]]
    manifest_path: Path
    meta_path: Path

    @property
    def ok(self) -> bool:
        return not self.failures


def _file_stem(image_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", image_id)


def _check_file_stems(pristine: Sequence[ImageRecord], ladder: DistortionLadder) -> None:
    """Every pristine image and view must get its own output file."""
    owners: Dict[str, str] = {}
    clashes: List[Tuple[str, str, str]] = []
    for record in pristine:
        for image_id in [record.id] + [f"{record.id}__{spec.tag}" for spec in ladder]:
            # case-folded for case-insensitive filesystems
            stem = _file_stem(image_id).lower()
            if stem in owners:
                clashes.append((owners[stem], image_id, stem))
            else:
                owners[stem] = image_id
    if clashes:
        first, second, stem = clashes[0]
        raise DuplicateId(f"Image ids '{first}' and '{second}' would both be written to {stem}.png",
                          duplicates=sorted({c[1] for c in clashes}),
                          details={"collisions": [{"ids": [a, b], "file": f"{s}.png"} for a, b, s in clashes[:20]]})


def _expand_one(record: ImageRecord, ladder: DistortionLadder, output_directory: Path,
                max_side: Optional[int]) -> Tuple[List[ImageRecord], List[Dict[str, Any]]]:
    """Expand a single pristine record; failures are returned, not raised."""
    try:
        img = load_image(record.path)
        if max_side is not None and max(img.size) != max_side:
            img = resize_largest_side(img, max_side)

        pristine_path = output_directory / f"{_file_stem(record.id)}.png"
        save_image(img, pristine_path)
        rows = [ImageRecord(id=record.id, subject_id=record.id, path=pristine_path, source=record.source,
                            mos=record.mos, native_range=record.native_range)]

        for spec, distorted in expand_pristine(img, ladder):
            view_id = f"{record.id}__{spec.tag}"
            view_path = output_directory / f"{_file_stem(view_id)}.png"
            save_image(distorted, view_path)
            rows.append(ImageRecord(id=view_id, subject_id=record.id, path=view_path, source=record.source,
                                    native_range=record.native_range,
                                    family=spec.family.value, level=spec.level))
        return rows, []
    except IQAForgeError as e:
        e.details.setdefault("image_id", record.id)
        return [], [e.to_dict()]
    except Exception as e:
        failure = format_error_for_response(e)
        failure["details"]["image_id"] = record.id
        return [], [failure]


def generate_dataset(pristine: List[ImageRecord], ladder: DistortionLadder,
                     output_directory: Union[str, Path], manifest_name: str = "manifest.csv",
                     jobs: int = 1, max_side: Optional[int] = None) -> GenerationResult:
    """
    Expand every pristine record into its distorted views and write the manifest.

    Args:
        pristine: Pristine records; their ids become the subject ids of all views
        ladder: Distortion ladder applied to each pristine image
        output_directory: Destination for PNG files, the manifest and its meta file
        manifest_name: File name of the emitted manifest
        jobs: Worker count for the expansion
        max_side: If set, pristine images are first resized so their largest side matches

    Returns:
        GenerationResult with rows in input order and per-image failures
    """
    _check_file_stems(pristine, ladder)
    output_directory = Path(output_directory)
    try:
        output_directory.mkdir(parents=True, exist_ok=True)
        marker = output_directory / ".write_check"
        marker.write_bytes(b"")
        marker.unlink()
    except OSError as e:
        raise IoError(f"Output directory {output_directory} is not writable: {e}",
                      path=output_directory, original_exception=e)

    logger.info(f"Expanding {len(pristine)} pristine image(s) with a {len(ladder)}-entry ladder, jobs={jobs}")
    outcomes = Parallel(n_jobs=jobs)(
        delayed(_expand_one)(record, ladder, output_directory, max_side) for record in pristine
    )

    records: List[ImageRecord] = []
    failures: List[Dict[str, Any]] = []
    for rows, errors in outcomes:
        records.extend(rows)
        failures.extend(errors)
    for failure in failures:
        logger.error(f"Failed to expand {failure['details'].get('image_id')}: {failure['message']}")

    manifest_path = output_directory / manifest_name
    write_manifest(records, manifest_path)

    meta_path = manifest_path.with_suffix(".meta.json")
    meta = {
        "codec": codec_info(),
        "ladder": ladder.to_rows(),
        "max_side": max_side,
        "n_pristine": len(pristine),
        "n_rows": len(records),
        "n_failures": len(failures),
        "package_version": __version__,
    }
    try:
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot write {meta_path}: {e}", path=meta_path, original_exception=e)

    logger.info(f"Wrote {len(records)} manifest rows to {manifest_path} ({len(failures)} failure(s))")
    return GenerationResult(records=records, failures=failures, manifest_path=manifest_path, meta_path=meta_path)
