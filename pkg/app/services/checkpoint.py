"""
Checkpoint file layout (all integers little-endian):

    magic      8 bytes   b"SDNCKPT\\0"
    version    uint32
    count      uint32    number of tensors
    count x tensor:
        name_len uint16, name (utf-8)
        dtype    uint8   (0 = float32, 1 = float64)
        ndim     uint8,  dims uint32 x ndim
        nbytes   uint64, raw array bytes in C order
    meta_len   uint64
    meta       utf-8 JSON: arch, train, epoch, rng_state, tensor_sha256, extra
"""
import io
import json
import logging
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .. import utils
from ..models import ChecksumError, ValidationError
from .model import ArchConfig, StateDiffNet

logger = logging.getLogger(__name__)

MAGIC = b"SDNCKPT\0"
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


def save_checkpoint(path: Union[str, Path], model: StateDiffNet, train_config: Optional[dict] = None,
                    epoch: int = 0, rng: Optional[np.random.Generator] = None, extra: Optional[dict] = None,
                    rng_state: Optional[dict] = None) -> Path:
    """rng, or an already captured rng_state, is stored so restore_rng continues the exact stream."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    body = io.BytesIO()
    named = model.named_parameters()
    body.write(struct.pack("<I", len(named)))
    for name, tensor in named.items():
        array = np.ascontiguousarray(tensor.data, dtype=tensor.data.dtype.newbyteorder("<"))
        encoded = name.encode("utf-8")
        body.write(struct.pack("<H", len(encoded)))
        body.write(encoded)
        body.write(struct.pack("<BB", DTYPE_CODES[array.dtype], array.ndim))
        body.write(struct.pack(f"<{array.ndim}I", *array.shape))
        raw = array.tobytes(order="C")
        body.write(struct.pack("<Q", len(raw)))
        body.write(raw)
    tensor_bytes = body.getvalue()

    meta = {
        "arch": json.loads(model.arch.model_dump_json()),
        "train": train_config or {},
        "epoch": epoch,
        "rng_state": rng.bit_generator.state if rng is not None else rng_state,
        "tensor_sha256": utils.calculate_file_hash(tensor_bytes),
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(tensor_bytes)
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
    logger.info(f"Saved checkpoint {path} (epoch {epoch})")
    return path


def _read(stream: io.BytesIO, fmt: str):
    size = struct.calcsize(fmt)
    chunk = stream.read(size)
    if len(chunk) != size:
        raise ValidationError("checkpoint is complete", "file ends early")
    return struct.unpack(fmt, chunk)


def read_checkpoint(path: Union[str, Path]) -> Tuple[dict, dict]:
    """Raw tensors by name and the metadata document."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ValidationError("checkpoint magic", f"{path} is not a checkpoint file")
    stream = io.BytesIO(data[len(MAGIC):])
    (version,) = _read(stream, "<I")
    if version != FORMAT_VERSION:
        raise ValidationError("checkpoint version", f"unsupported version {version}")

    start = stream.tell()
    (count,) = _read(stream, "<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = _read(stream, "<H")
        name = stream.read(name_len).decode("utf-8")
        code, ndim = _read(stream, "<BB")
        shape = _read(stream, f"<{ndim}I") if ndim else ()
        (nbytes,) = _read(stream, "<Q")
        raw = stream.read(nbytes)
        if len(raw) != nbytes:
            raise ValidationError("checkpoint is complete", f"tensor '{name}' truncated")
        tensors[name] = np.frombuffer(raw, dtype=CODE_DTYPES[code]).reshape(shape).copy()
    tensor_bytes = data[len(MAGIC) + start:len(MAGIC) + stream.tell()]

    (meta_len,) = _read(stream, "<Q")
    meta = json.loads(stream.read(meta_len).decode("utf-8"))
    actual = utils.calculate_file_hash(tensor_bytes)
    if actual != meta.get("tensor_sha256"):
        raise ChecksumError(path, meta.get("tensor_sha256", ""), actual)
    return tensors, meta


def load_checkpoint(path: Union[str, Path]) -> Tuple[StateDiffNet, dict]:
    """Model rebuilt from the stored architecture, with the stored parameters."""
    tensors, meta = read_checkpoint(path)
    arch = ArchConfig.model_validate(meta["arch"])
    dtype = next(iter(tensors.values())).dtype if tensors else np.float32
    model = StateDiffNet(arch, np.random.default_rng(0), dtype=dtype)
    model.load_state(tensors)
    return model, meta


def restore_rng(meta: dict) -> Optional[np.random.Generator]:
    state = meta.get("rng_state")
    if not state:
        return None
    bit_generator = getattr(np.random, state["bit_generator"])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)
