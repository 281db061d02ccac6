"""
IO Formats - Checkpoints, PNG rasters, manifests and training history

Checkpoint layout (all integers little-endian u32, floats IEEE-754 binary32):

    b"DSSN" | version | len(config) | NetConfig JSON (UTF-8) | parameter count
    per parameter: len(name) | name (UTF-8) | rank | dims x rank | values (row-major)

Loading rebuilds the graph from the embedded NetConfig and checks every
parameter's name and shape against it before installing any value, so a bad
file never yields a partially initialized network.

Images are PNG (any Pillow-readable 8-bit raster for backgrounds). Manifests
are JSON lines whose paths are relative to the manifest's directory.
"""

import csv
import json
import logging
import struct
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError

from src.config import format_validation_error
from src.images import BinaryMask, ImageError, RgbaImage, RgbImage
from src.models import CompositeRecord, NetConfig
from src.smokenet import SmokeNet, build_network

logger = logging.getLogger("smokeseg.io")

MAGIC = b"DSSN"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")
_FLOAT = np.dtype("<f4")


# =============================================================================
# ERRORS
# =============================================================================


class CheckpointError(ValueError):
    """Base class for unreadable or mismatched checkpoints."""


class BadMagicError(CheckpointError):
    """The file does not start with the checkpoint magic."""


class VersionMismatchError(CheckpointError):
    """The checkpoint was written by an unsupported format version."""


class TruncatedCheckpointError(CheckpointError):
    """The file ended before the declared payload."""


class ParameterMismatchError(CheckpointError):
    """Stored parameter names or shapes differ from the graph the config builds."""


class UnsupportedImageError(ImageError):
    """The image's bit depth or color type cannot be read as requested."""


class ManifestError(ValueError):
    """A manifest line is not valid JSON or not a valid record."""


# =============================================================================
# CHECKPOINTS
# =============================================================================


def encode_checkpoint(net: SmokeNet) -> bytes:
    """Serialize a network's config and parameters (always as 32-bit floats)."""
    config_blob = net.config.model_dump_json().encode("utf-8")
    chunks = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(config_blob)), config_blob, _U32.pack(len(net.params))]
    for param in net.params:
        name = param.name.encode("utf-8")
        chunks += [_U32.pack(len(name)), name, _U32.pack(param.value.ndim)]
        chunks += [_U32.pack(d) for d in param.value.shape]
        chunks.append(np.ascontiguousarray(param.value, dtype=_FLOAT).tobytes(order="C"))
    return b"".join(chunks)


def save_checkpoint(net: SmokeNet, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(net)
    path.write_bytes(payload)
    logger.info(f"Wrote checkpoint {path} ({len(payload)} bytes, {len(net.params)} tensors)")


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.payload):
            raise TruncatedCheckpointError(
                f"{self.source}: truncated while reading {what} (need {n} bytes at offset {self.offset}, "
                f"file has {len(self.payload)})"
            )
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        value: int = _U32.unpack(self.take(4, what))[0]
        return value


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> SmokeNet:
    """
    Rebuild a network from checkpoint bytes.

    Raises:
        BadMagicError, VersionMismatchError, TruncatedCheckpointError,
        ParameterMismatchError, CheckpointError (undecodable config or trailing bytes)
    """
    reader = _Reader(payload, source)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version = reader.u32("format version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{source}: format version {version}, this build reads {FORMAT_VERSION}")

    blob = reader.take(reader.u32("config length"), "config")
    try:
        config = NetConfig.model_validate_json(blob.decode("utf-8"))
    except (UnicodeDecodeError, ValidationError) as e:
        detail = format_validation_error(e) if isinstance(e, ValidationError) else str(e)
        raise CheckpointError(f"{source}: embedded NetConfig is invalid: {detail}") from e

    count = reader.u32("parameter count")
    values: list[tuple[str, np.ndarray]] = []
    for index in range(count):
        name = reader.take(reader.u32(f"name length of tensor {index}"), f"name of tensor {index}").decode("utf-8")
        rank = reader.u32(f"rank of {name}")
        dims = tuple(reader.u32(f"dimension {axis} of {name}") for axis in range(rank))
        size = int(np.prod(dims, dtype=np.int64))
        raw = reader.take(size * _FLOAT.itemsize, f"values of {name}")
        values.append((name, np.frombuffer(raw, dtype=_FLOAT).reshape(dims).astype(np.float32)))

    if reader.offset != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - reader.offset} trailing bytes after the last tensor")

    net = build_network(config)
    expected = [(p.name, p.shape) for p in net.params]
    stored = [(name, tuple(value.shape)) for name, value in values]
    if expected != stored:
        mismatch = next(
            (f"{e} vs stored {s}" for e, s in zip(expected, stored, strict=False) if e != s),
            f"{len(expected)} tensors expected, {len(stored)} stored",
        )
        raise ParameterMismatchError(f"{source}: parameters do not match the {config.variant_name} graph: {mismatch}")

    for param, (_, value) in zip(net.params, values, strict=True):
        param.value = value
        param.momentum = np.zeros_like(value)
        param.grad = None
    return net


def load_checkpoint(path: Path) -> SmokeNet:
    path = Path(path)
    net = decode_checkpoint(path.read_bytes(), source=str(path))
    logger.info(f"Loaded checkpoint {path}: {net.config.variant_name}, {net.parameter_count()} parameters")
    return net


def import_npz_weights(net: SmokeNet, path: Path) -> list[str]:
    """
    Install externally converted weights from an .npz keyed by parameter name.

    Keys must be a subset of the network's parameter names, with matching
    shapes and (k, k, cin, cout) weight layout; parameters not present keep
    their current values. Nothing is installed unless every key checks out.

    Returns:
        The parameter names that were replaced
    """
    with np.load(Path(path), allow_pickle=False) as archive:
        staged: dict[str, np.ndarray] = {}
        for key in archive.files:
            try:
                param = net.param(key)
            except KeyError as e:
                raise ParameterMismatchError(f"{path}: unknown parameter {key!r}") from e
            value = archive[key]
            if value.shape != param.shape:
                raise ParameterMismatchError(f"{path}: {key} has shape {value.shape}, network expects {param.shape}")
            staged[key] = value.astype(net.dtype)

    for key, value in staged.items():
        param = net.param(key)
        param.value = value
        param.momentum = np.zeros_like(value)
    logger.info(f"Imported {len(staged)} tensors from {path}")
    return sorted(staged)


# =============================================================================
# IMAGES
# =============================================================================

ImageKind = Literal["rgb", "rgba", "mask"]

_EIGHT_BIT_MODES = {"1", "L", "LA", "P", "RGB", "RGBA"}

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_PNG_COLOR_TYPES = {0: "gray", 2: "RGB", 3: "palette", 4: "gray+alpha", 6: "RGBA"}


def _png_bit_depth(path: Path) -> tuple[int, str] | None:
    """Bit depth and color type from a PNG IHDR chunk, or None for other formats."""
    with open(path, "rb") as f:
        head = f.read(26)
    if len(head) < 26 or not head.startswith(_PNG_SIGNATURE) or head[12:16] != b"IHDR":
        return None
    return head[24], _PNG_COLOR_TYPES.get(head[25], f"type {head[25]}")


def _open(path: Path) -> Image.Image:
    # Pillow narrows 16-bit RGB/RGBA PNGs to 8-bit modes on load
    ihdr = _png_bit_depth(path)
    if ihdr is not None and ihdr[0] > 8:
        depth, color = ihdr
        raise UnsupportedImageError(f"{path}: {depth}-bit {color} PNG; 8-bit images only")
    try:
        with Image.open(path) as img:
            img.load()
            return img.copy()
    except UnidentifiedImageError as e:
        raise UnsupportedImageError(f"{path}: not a readable image") from e


def load_image(path: Path, kind: ImageKind) -> RgbImage | RgbaImage | BinaryMask:
    """
    Read an 8-bit raster.

    Args:
        path: Image file
        kind: "rgb" (palette/gray/alpha images are converted), "rgba" (an alpha
            channel is required), or "mask" (grayscale, > 127 is smoke)

    Raises:
        UnsupportedImageError: On 16-bit or float rasters, or a missing alpha channel for "rgba"
    """
    path = Path(path)
    img = _open(path)
    if img.mode not in _EIGHT_BIT_MODES:
        raise UnsupportedImageError(f"{path}: unsupported color type/bit depth {img.mode!r}; 8-bit images only")

    if kind == "rgba":
        if img.mode not in ("RGBA", "LA") and not (img.mode == "P" and "transparency" in img.info):
            raise UnsupportedImageError(f"{path}: pure smoke needs an alpha channel, got mode {img.mode!r}")
        return RgbaImage(np.asarray(img.convert("RGBA"), dtype=np.uint8))
    if kind == "mask":
        gray = np.asarray(img.convert("L"), dtype=np.uint8)
        return BinaryMask.from_bool(gray > 127)
    return RgbImage(np.asarray(img.convert("RGB"), dtype=np.uint8))


def save_image(image: RgbImage | RgbaImage | BinaryMask | np.ndarray, path: Path) -> None:
    """Write a raster as PNG; a bare (h, w) uint8 array is written as grayscale."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(image, BinaryMask):
        pixels = image.to_gray()
    elif isinstance(image, RgbImage | RgbaImage):
        pixels = image.pixels
    else:
        pixels = np.asarray(image)
        if pixels.dtype != np.uint8 or pixels.ndim != 2:
            raise UnsupportedImageError(f"{path}: raw arrays must be (h, w) uint8, got {pixels.dtype} {pixels.shape}")
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PNG")


# =============================================================================
# MANIFESTS
# =============================================================================


def write_manifest(records: Iterable[CompositeRecord], path: Path) -> int:
    """Write one JSON object per record; unset optional keys are omitted."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [record.model_dump_json(exclude_none=True) for record in records]
    path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    return len(lines)


def read_manifest(path: Path) -> list[CompositeRecord]:
    """
    Parse a JSON-lines manifest; blank lines are ignored.

    Raises:
        ManifestError: Naming the first bad line
    """
    path = Path(path)
    records = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(CompositeRecord.model_validate(json.loads(line)))
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{number}: not valid JSON: {e}") from e
        except ValidationError as e:
            raise ManifestError(f"{path}:{number}: {format_validation_error(e)}") from e
    return records


# =============================================================================
# TABLES
# =============================================================================


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    """Write a small CSV table (history.csv, epochs.csv, detection results)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
