"""
Storage module for the SAMI toolkit
Handles all file formats: the SMD1 dataset, SAMI v1 checkpoints, PGM image
grids, CSV reports and the append-only run journal.

All binary formats are little-endian. Whole-file writes go to a temporary
file in the target directory and are renamed into place.
"""

import csv
import io
import json
import logging
import os
import struct
import tempfile
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import ConfigError, format_config, parse_config
from services.diffusion import schedule_from_config
from services.guidance import ModelBundle
from services.networks import ArchitectureError, DenoiserParams, EncoderParams, denoiser_layout, encoder_layout
from services.numerics import Tensor

logger = logging.getLogger(__name__)

# File format configuration
DATASET_MAGIC = b"SMD1"
CHECKPOINT_MAGIC = b"SAMI"
CHECKPOINT_VERSION = 1
DTYPE_TAGS = {"f32": (0, np.dtype("<f4")), "f64": (1, np.dtype("<f8"))}
SEPARATOR = 2
SEPARATOR_VALUE = 255
JOURNAL = "runs.jsonl"


class DatasetFormatError(ValueError):
    """Raised for malformed dataset files; the message names the byte offset and field."""


class CheckpointError(ValueError):
    """Raised for malformed or inconsistent checkpoints; the message names the byte offset and field."""


def atomic_write(path, payload: bytes) -> None:
    """Write bytes to path via a temporary file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    handle = tempfile.NamedTemporaryFile(dir=directory, prefix=".tmp-", delete=False)
    try:
        with handle:
            handle.write(payload)
        os.replace(handle.name, path)
    except BaseException:
        if os.path.exists(handle.name):
            os.remove(handle.name)
        raise
    logger.info("wrote %s (%d bytes)", path, len(payload))


# ---------- dataset ----------
def _record_dtype(width: int, height: int) -> np.dtype:
    return np.dtype([("image", "<f4", (height * width,)), ("factors", "<f4", (3,))])


def encode_dataset(images: np.ndarray, factors: np.ndarray) -> bytes:
    """images [N, 1, H, W] (or [N, H, W]), factors [N, 3] -> SMD1 bytes."""
    images = np.asarray(images)
    n, height, width = images.shape[0], images.shape[-2], images.shape[-1]
    records = np.zeros(n, dtype=_record_dtype(width, height))
    records["image"] = images.reshape(n, -1)
    records["factors"] = factors
    return DATASET_MAGIC + struct.pack("<III", width, height, n) + records.tobytes()


def decode_dataset(payload: bytes) -> Tuple[np.ndarray, np.ndarray]:
    """
    SMD1 bytes -> (images [N, 1, H, W] float64, factors [N, 3] float64).

    Raises:
        DatasetFormatError: bad magic, truncated header or records, trailing bytes
    """
    if len(payload) < 4 or payload[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"offset 0: magic: expected {DATASET_MAGIC!r}, got {payload[:4]!r}")
    if len(payload) < 16:
        raise DatasetFormatError(f"offset 4: header: need 12 bytes, file has {len(payload) - 4}")
    width, height, n = struct.unpack_from("<III", payload, 4)
    dtype = _record_dtype(width, height)
    expected = 16 + n * dtype.itemsize
    if len(payload) < expected:
        index = (len(payload) - 16) // dtype.itemsize
        raise DatasetFormatError(
            f"offset {16 + index * dtype.itemsize}: record {index}: truncated ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise DatasetFormatError(f"offset {expected}: trailing data: {len(payload) - expected} unexpected bytes")
    records = np.frombuffer(payload, dtype=dtype, count=n, offset=16)
    images = records["image"].astype(np.float64).reshape(n, 1, height, width)
    return images, records["factors"].astype(np.float64)


def save_dataset(images: np.ndarray, factors: np.ndarray, path) -> None:
    atomic_write(path, encode_dataset(images, factors))


def load_dataset(path) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as handle:
        return decode_dataset(handle.read())


# ---------- checkpoint ----------
class _Reader:
    """Cursor over checkpoint bytes; every read names the field it was reading."""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int, field: str) -> bytes:
        if self.offset + size > len(self.payload):
            raise CheckpointError(
                f"offset {self.offset}: {field}: truncated (need {size} bytes, {len(self.payload) - self.offset} left)")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))

    def string(self, field: str) -> str:
        (length,) = self.unpack("<I", f"{field} length")
        at = self.offset
        try:
            return self.take(length, field).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"offset {at}: {field}: not valid UTF-8") from None


def _pack_string(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(bundle: ModelBundle, dtype: str = "f64") -> bytes:
    """Serialize a bundle; dtype "f32" narrows the stored tensors."""
    if dtype not in DTYPE_TAGS:
        raise CheckpointError(f"unknown storage dtype '{dtype}'")
    tag, np_dtype = DTYPE_TAGS[dtype]
    sched = bundle.schedule
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
    out.write(_pack_string(sched.kind) + struct.pack("<II", sched.levels, len(sched.params)))
    for name, value in sched.params:
        out.write(_pack_string(name) + struct.pack("<d", value))
    out.write(_pack_string(format_config(bundle.config)))
    tensors = [(f"denoiser/{k}", v) for k, v in bundle.denoiser.tensors.items()]
    tensors += [(f"encoder/{k}", v) for k, v in bundle.encoder.tensors.items()]
    out.write(struct.pack("<I", len(tensors)))
    for name, tensor in tensors:
        out.write(_pack_string(name) + struct.pack("<BI", tag, tensor.ndim))
        out.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        out.write(np.ascontiguousarray(tensor.data, dtype=np_dtype).tobytes())
    return out.getvalue()


def _expected_shapes(config) -> Dict[str, Tuple[int, ...]]:
    m = config.model
    shapes = {f"denoiser/{k}": v for k, v in
              denoiser_layout(m.image_size, m.denoiser_base_channels, m.denoiser_multipliers).items()}
    shapes.update({f"encoder/{k}": v for k, v in
                   encoder_layout(m.image_size, m.encoder_arch, m.encoder_base_channels, m.encoder_multipliers,
                                  m.encoder_bias, m.latent_dim).items()})
    return shapes


def decode_checkpoint(payload: bytes) -> ModelBundle:
    """
    Parse and validate a checkpoint; nothing is returned unless the whole file checks out.

    Raises:
        CheckpointError: bad magic or version, truncation, config echo that does
            not parse, schedule or tensor shapes inconsistent with the config
    """
    reader = _Reader(payload)
    magic = reader.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"offset 0: magic: expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
    (version,) = reader.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"offset 4: version: unsupported checkpoint version {version}")

    kind = reader.string("schedule kind")
    levels, n_params = reader.unpack("<II", "schedule header")
    params = {}
    for _ in range(n_params):
        name = reader.string("schedule parameter name")
        (params[name],) = reader.unpack("<d", f"schedule parameter {name}")

    at = reader.offset
    text = reader.string("config echo")
    try:
        config = parse_config(text)
    except ConfigError as exc:
        raise CheckpointError(f"offset {at}: config echo: {exc}") from None
    schedule = schedule_from_config(config.schedule)
    if (kind, levels, params) != (schedule.kind, schedule.levels, schedule.describe()):
        raise CheckpointError(f"offset {at}: schedule descriptor ({kind}, T={levels}) disagrees with config echo")

    try:
        expected = _expected_shapes(config)
    except ArchitectureError as exc:
        raise CheckpointError(f"offset {at}: config echo: {exc}") from None
    (count,) = reader.unpack("<I", "tensor count")
    tensors: Dict[str, np.ndarray] = {}
    for index in range(count):
        at = reader.offset
        name = reader.string(f"tensor {index} name")
        tag, rank = reader.unpack("<BI", f"tensor {name} header")
        dtypes = {code: np_dtype for code, np_dtype in DTYPE_TAGS.values()}
        if tag not in dtypes:
            raise CheckpointError(f"offset {at}: tensor {name}: unknown dtype tag {tag}")
        shape = reader.unpack(f"<{rank}I", f"tensor {name} shape")
        if name not in expected:
            raise CheckpointError(f"offset {at}: tensor {name}: not part of the configured architecture")
        if tuple(shape) != tuple(expected[name]):
            raise CheckpointError(f"offset {at}: tensor {name}: shape {shape} but config implies {expected[name]}")
        size = int(np.prod(shape)) * dtypes[tag].itemsize
        data = np.frombuffer(reader.take(size, f"tensor {name} payload"), dtype=dtypes[tag])
        tensors[name] = data.astype(np.float64).reshape(shape)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise CheckpointError(f"offset {reader.offset}: tensor table: missing {', '.join(missing)}")
    if reader.offset != len(payload):
        raise CheckpointError(f"offset {reader.offset}: trailing data: {len(payload) - reader.offset} unexpected bytes")

    m = config.model
    denoiser = DenoiserParams(
        {k[len("denoiser/"):]: Tensor(v, requires_grad=True) for k, v in tensors.items() if k.startswith("denoiser/")},
        m.image_size, m.denoiser_base_channels, tuple(m.denoiser_multipliers), m.denoiser_nonlinearity,
        config.schedule.levels)
    encoder = EncoderParams(
        {k[len("encoder/"):]: Tensor(v, requires_grad=True) for k, v in tensors.items() if k.startswith("encoder/")},
        m.image_size, m.encoder_arch, m.encoder_base_channels, tuple(m.encoder_multipliers),
        m.encoder_nonlinearity, m.encoder_bias, m.latent_dim)
    return ModelBundle(denoiser, encoder, schedule, config)


def save_checkpoint(bundle: ModelBundle, path, dtype: str = "f64") -> None:
    atomic_write(path, encode_checkpoint(bundle, dtype))


def load_checkpoint(path) -> ModelBundle:
    with open(path, "rb") as handle:
        return decode_checkpoint(handle.read())


# ---------- images ----------
def quantize(values: np.ndarray) -> np.ndarray:
    """round(255 * clamp(v, 0, 1)) with halves rounded up."""
    return np.floor(255.0 * np.clip(values, 0.0, 1.0) + 0.5).astype(np.uint8)


def encode_image_grid(images, rows: int, cols: int) -> bytes:
    """Tile images row-major into one P5 PGM with separator lines between cells."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    images = images.reshape((-1,) + images.shape[-2:])
    if rows * cols < images.shape[0]:
        raise ValueError(f"a {rows}x{cols} grid cannot hold {images.shape[0]} images")
    height, width = images.shape[1:]
    canvas_h = rows * height + (rows - 1) * SEPARATOR
    canvas_w = cols * width + (cols - 1) * SEPARATOR
    canvas = np.full((canvas_h, canvas_w), SEPARATOR_VALUE, dtype=np.uint8)
    for index in range(rows * cols):
        r, c = divmod(index, cols)
        cell = quantize(images[index]) if index < images.shape[0] else np.zeros((height, width), np.uint8)
        top, left = r * (height + SEPARATOR), c * (width + SEPARATOR)
        canvas[top:top + height, left:left + width] = cell
    return b"P5\n%d %d\n255\n" % (canvas_w, canvas_h) + canvas.tobytes()


def write_image_grid(images, rows: int, cols: int, path) -> None:
    atomic_write(path, encode_image_grid(images, rows, cols))


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P5 PGM as a float array [H, W] in [0, 1]."""
    with open(path, "rb") as handle:
        payload = handle.read()
    tokens, offset = [], 0
    while len(tokens) < 4:
        while offset < len(payload) and payload[offset:offset + 1].isspace():
            offset += 1
        if payload[offset:offset + 1] == b"#":
            offset = payload.index(b"\n", offset) + 1
            continue
        start = offset
        while offset < len(payload) and not payload[offset:offset + 1].isspace():
            offset += 1
        if start == offset:
            raise DatasetFormatError(f"offset {offset}: PGM header: truncated")
        tokens.append(payload[start:offset])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise DatasetFormatError("offset 0: PGM header: only 8-bit binary (P5) images are supported")
    width, height = int(tokens[1]), int(tokens[2])
    offset += 1
    if len(payload) - offset < width * height:
        raise DatasetFormatError(f"offset {offset}: PGM pixels: truncated")
    pixels = np.frombuffer(payload, dtype=np.uint8, count=width * height, offset=offset)
    return pixels.reshape(height, width).astype(np.float64) / 255.0


# ---------- reports ----------
def encode_csv(rows: Sequence[Dict], columns: Optional[Sequence[str]] = None) -> bytes:
    columns = list(columns or (rows[0].keys() if rows else []))
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return out.getvalue().encode("utf-8")


def write_csv(rows: Sequence[Dict], path, columns: Optional[Sequence[str]] = None) -> None:
    atomic_write(path, encode_csv(rows, columns))


def write_run_log(run_log, path) -> None:
    write_csv(run_log.rows(), path, run_log.COLUMNS)


def read_latent(path) -> np.ndarray:
    """A latent vector stored as comma- or whitespace-separated numbers."""
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read().replace(",", " ")
    try:
        return np.array([float(v) for v in text.split()], dtype=np.float64)
    except ValueError:
        raise DatasetFormatError(f"{path}: latent file must hold numbers only") from None


# ---------- run journal ----------
def append_journal(path, command: str, config_hash: str, seed: int, outputs: Iterable[str]) -> Dict:
    """Append one manifest line describing a command run."""
    entry = {"command": command, "config_hash": config_hash, "seed": seed, "outputs": [str(o) for o in outputs]}
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "a", encoding="utf-8") as handle:
        handle.write(json.dumps(entry, sort_keys=True) + "\n")
    return entry


def read_journal(path) -> List[Dict]:
    if not os.path.exists(path):
        return []
    with open(path, "r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
