from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
import os
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .util import file_sha256

IDX_DTYPES: Dict[int, np.dtype] = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_HEADER_SIZE = 4

_logger = logging.getLogger("sml_sim.ingest")


def _read_idx_header(data: bytes) -> Tuple[np.dtype, Tuple[int, ...], int]:
    if len(data) < IDX_HEADER_SIZE:
        raise ValueError("truncated IDX magic")
    if data[0] != 0 or data[1] != 0:
        raise ValueError(f"bad IDX magic {data[:4].hex()}")
    code = data[2]
    ndim = data[3]
    if code not in IDX_DTYPES:
        raise ValueError(f"unknown IDX dtype code 0x{code:02x}")
    end = IDX_HEADER_SIZE + 4 * ndim
    if len(data) < end:
        raise ValueError("truncated IDX dimensions")
    dims = tuple(int.from_bytes(data[offset:offset + 4], "big") for offset in range(IDX_HEADER_SIZE, end, 4))
    return IDX_DTYPES[code], dims, end


def parse_idx(data: bytes) -> np.ndarray:
    dtype, dims, offset = _read_idx_header(data)
    count = int(np.prod(dims)) if dims else 1
    expected = offset + count * dtype.itemsize
    if len(data) < expected:
        raise ValueError(f"truncated IDX payload: {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise ValueError(f"IDX payload has {len(data) - expected} trailing bytes")
    values = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return values.astype(dtype.newbyteorder("=")).reshape(dims)


def read_idx(path: str) -> np.ndarray:
    with open(path, "rb") as handle:
        return parse_idx(handle.read())


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    for code, dtype in IDX_DTYPES.items():
        if array.dtype.kind == dtype.kind and array.dtype.itemsize == dtype.itemsize:
            header = bytes([0, 0, code, array.ndim])
            dims = b"".join(int(n).to_bytes(4, "big") for n in array.shape)
            return header + dims + array.astype(dtype).tobytes()
    raise ValueError(f"dtype {array.dtype} has no IDX type code")


def write_idx(path: str, array: np.ndarray) -> None:
    with open(path, "wb") as handle:
        handle.write(encode_idx(array))


def read_labeled_csv(path: str, shape: Optional[Tuple[int, int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Rows of ``label,p0,p1,...``; an optional first line starting with ``label`` is skipped."""
    with open(path, "r", encoding="utf-8") as handle:
        first = handle.readline()
    skip = 1 if first.strip().lower().startswith("label") else 0
    table = np.loadtxt(path, delimiter=",", skiprows=skip, dtype=np.int64, ndmin=2)
    if table.shape[1] < 2:
        raise ValueError(f"CSV {path} needs a label column and at least one pixel")
    labels = table[:, 0].astype(int)
    pixels = table[:, 1:]
    if np.any(pixels < 0) or np.any(pixels > 255):
        raise ValueError(f"CSV {path} has pixel values outside [0, 255]")
    pixels = pixels.astype(np.uint8)
    if shape is not None:
        if shape[0] * shape[1] != pixels.shape[1]:
            raise ValueError(f"CSV rows have {pixels.shape[1]} pixels, image shape {shape} needs {shape[0] * shape[1]}")
        pixels = pixels.reshape(-1, shape[0], shape[1])
    return pixels, labels


def write_labeled_csv(path: str, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images)
    flat = images.reshape(images.shape[0], -1).astype(np.int64)
    table = np.column_stack([np.asarray(labels, dtype=np.int64), flat])
    header = ",".join(["label"] + [f"p{i}" for i in range(flat.shape[1])])
    np.savetxt(path, table, fmt="%d", delimiter=",", header=header, comments="")


@dataclass
class DatasetManifest:
    path: str
    image_shape: Tuple[int, int] = (28, 28)
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None
    csv: Optional[str] = None
    sha256: Dict[str, str] = field(default_factory=dict)

    def resolve(self, name: str) -> str:
        return os.path.join(os.path.dirname(os.path.abspath(self.path)), name)

    def files(self) -> List[str]:
        return [name for name in (self.idx_images, self.idx_labels, self.csv) if name]


def load_manifest(path: str) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as handle:
        payload = json.load(handle)
    manifest = DatasetManifest(path=path)
    if "image_shape" in payload:
        manifest.image_shape = tuple(int(n) for n in payload["image_shape"])
    idx = payload.get("idx") or {}
    manifest.idx_images = idx.get("images")
    manifest.idx_labels = idx.get("labels")
    manifest.csv = payload.get("csv")
    manifest.sha256 = dict(payload.get("sha256", {}))
    if not manifest.files():
        raise ValueError(f"manifest {path} lists neither IDX nor CSV files")
    return manifest


def save_manifest(manifest: DatasetManifest) -> None:
    payload: Dict[str, object] = {"image_shape": list(manifest.image_shape), "sha256": manifest.sha256}
    if manifest.idx_images or manifest.idx_labels:
        payload["idx"] = {"images": manifest.idx_images, "labels": manifest.idx_labels}
    if manifest.csv:
        payload["csv"] = manifest.csv
    with open(manifest.path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)


@dataclass(frozen=True)
class FileCheck:
    name: str
    exists: bool
    expected: Optional[str]
    actual: Optional[str]

    @property
    def ok(self) -> bool:
        return self.exists and (self.expected is None or self.expected == self.actual)


def verify_manifest(manifest: DatasetManifest) -> List[FileCheck]:
    checks: List[FileCheck] = []
    for name in manifest.files():
        resolved = manifest.resolve(name)
        expected = manifest.sha256.get(name)
        if not os.path.exists(resolved):
            _logger.warning("Dataset file missing name=%s path=%s", name, resolved)
            checks.append(FileCheck(name, False, expected, None))
            continue
        actual = file_sha256(resolved)
        if expected is not None and expected != actual:
            _logger.warning("Dataset hash mismatch name=%s expected=%s actual=%s", name, expected, actual)
        checks.append(FileCheck(name, True, expected, actual))
    return checks


class ImageLoader:
    """Tries IDX first and falls back to CSV; the last failure is re-raised."""

    def __init__(self, manifest: DatasetManifest) -> None:
        self._manifest = manifest
        self._logger = logging.getLogger("sml_sim.ingest.loader")

    def _sources(self) -> List[Tuple[str, Callable[[], Tuple[np.ndarray, np.ndarray]]]]:
        sources = []
        if self._manifest.idx_images and self._manifest.idx_labels:
            sources.append(("idx", self._load_idx))
        if self._manifest.csv:
            sources.append(("csv", self._load_csv))
        return sources

    def _load_idx(self) -> Tuple[np.ndarray, np.ndarray]:
        images = read_idx(self._manifest.resolve(self._manifest.idx_images))
        labels = read_idx(self._manifest.resolve(self._manifest.idx_labels))
        if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
            raise ValueError(f"IDX shapes images={images.shape} labels={labels.shape} do not pair up")
        if images.shape[1:] != tuple(self._manifest.image_shape):
            raise ValueError(f"IDX images are {images.shape[1:]}, manifest says {self._manifest.image_shape}")
        return images, labels.astype(int)

    def _load_csv(self) -> Tuple[np.ndarray, np.ndarray]:
        return read_labeled_csv(self._manifest.resolve(self._manifest.csv), tuple(self._manifest.image_shape))

    def load(self) -> Tuple[np.ndarray, np.ndarray]:
        last_error: Exception | None = None
        for name, loader in self._sources():
            self._logger.info("Loading images source=%s manifest=%s", name, self._manifest.path)
            try:
                images, labels = loader()
                self._logger.info("Loaded images source=%s count=%s shape=%s", name, images.shape[0], images.shape[1:])
                return images, labels
            except (OSError, ValueError) as exc:
                last_error = exc
                self._logger.warning("Image source %s failed: %s", name, exc)
                continue

        if last_error is not None:
            raise last_error
        raise ValueError(f"manifest {self._manifest.path} has no loadable image source")
