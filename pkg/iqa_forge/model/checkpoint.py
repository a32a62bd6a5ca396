# iqa_forge/model/checkpoint.py

"""
Model checkpoint container.

Byte layout (all integers little-endian):

    offset  size  content
    0       4     magic b"IQAF"
    4       2     uint16 format version (currently 1)
    6       4     uint32 header length H
    10      H     UTF-8 JSON header, keys sorted, compact separators
    10+H    ...   arrays listed in header["arrays"], in order, each as
                  little-endian float64 ('<f8') in C order

The header holds the layer widths, dropout rate, feature-extractor version,
the training config snapshot, free-form metadata, and for every array its
name and shape. Arrays are the network parameters W1, b1, ... followed by the
feature scaler's ``scaler_mean`` and ``scaler_std``.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from iqa_forge.model.features import FEATURE_VERSION, FeatureScaler
from iqa_forge.model.regressor import MlpRegressor
from iqa_forge.utils.enhanced_errors import CheckpointFormatError, IoError

logger = logging.getLogger(__name__)

MAGIC = b"IQAF"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sHI")


@dataclass
class ModelCheckpoint:
    model: MlpRegressor
    scaler: FeatureScaler
    config: Dict[str, Any] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)
    feature_version: str = FEATURE_VERSION

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Eval-mode predictions for a (n, D) feature matrix of unscaled features."""
        return self.model.predict(self.scaler.transform(np.atleast_2d(features)))

    def _arrays(self) -> List[tuple]:
        arrays = [(name, self.model.params[name]) for name in self.model.param_names()]
        arrays.append(("scaler_mean", self.scaler.mean_))
        arrays.append(("scaler_std", self.scaler.std_))
        return arrays

    def to_bytes(self) -> bytes:
        arrays = self._arrays()
        header = {
            "widths": list(self.model.widths),
            "dropout": self.model.dropout,
            "feature_version": self.feature_version,
            "config": self.config,
            "metadata": self.metadata,
            "arrays": [{"name": name, "shape": list(np.shape(value))} for name, value in arrays],
        }
        header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        # arrays follow the header as little-endian float64 in header order
        body = b"".join(np.ascontiguousarray(value, dtype="<f8").tobytes() for _, value in arrays)
        return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        if len(data) < _PREAMBLE.size:
            raise CheckpointFormatError(f"Checkpoint too short ({len(data)} bytes)")
        magic, version, header_length = _PREAMBLE.unpack_from(data, 0)
        if magic != MAGIC:
            raise CheckpointFormatError(f"Not a checkpoint: magic {magic!r}")
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"Unsupported checkpoint version {version}",
                                        details={"version": version})
        start = _PREAMBLE.size
        try:
            header = json.loads(data[start:start + header_length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"Corrupt checkpoint header: {e}", original_exception=e)

        try:
            return cls._from_header(header, data, start + header_length)
        except (AttributeError, KeyError, TypeError, ValueError) as e:
            raise CheckpointFormatError(f"Checkpoint header is missing or mistypes field {e}",
                                        details={"header_keys": sorted(header) if isinstance(header, dict) else []},
                                        original_exception=e)

    @classmethod
    def _from_header(cls, header: Dict[str, Any], data: bytes, offset: int) -> "ModelCheckpoint":
        arrays: Dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(int(n) for n in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = offset + 8 * count
            if end > len(data):
                raise CheckpointFormatError(f"Checkpoint truncated while reading {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
            offset = end
        # every byte must be accounted for
        if offset != len(data):
            raise CheckpointFormatError(f"{len(data) - offset} trailing byte(s) after the last array")

        scaler = FeatureScaler(arrays.pop("scaler_mean"), arrays.pop("scaler_std"))
        model = MlpRegressor(header["widths"], header["dropout"], arrays)
        return cls(model=model, scaler=scaler, config=header.get("config", {}),
                   metadata=header.get("metadata", {}), feature_version=header["feature_version"])

    def save(self, path: Union[str, Path]) -> None:
        try:
            Path(path).write_bytes(self.to_bytes())
        except OSError as e:
            raise IoError(f"Cannot write checkpoint {path}: {e}", path=path, original_exception=e)
        logger.info(f"Saved checkpoint to {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelCheckpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise IoError(f"Cannot read checkpoint {path}: {e}", path=path, original_exception=e)
        checkpoint = cls.from_bytes(data)
        if checkpoint.feature_version != FEATURE_VERSION:
            logger.warning(f"Checkpoint {path} was trained with features '{checkpoint.feature_version}', "
                           f"current extractor is '{FEATURE_VERSION}'")
        return checkpoint
