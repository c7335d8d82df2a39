"""Single-file model checkpoints.

Layout::

    b"MINF1\\n"
    uint64 little-endian header length
    header (utf-8):
        [config]
        model.<key> = <value>      (key-sorted)
        [manifest]
        <name> <dim>x<dim>...      (one line per array, manifest order)
    raw little-endian float64 arrays, concatenated in manifest order
"""

import logging
import struct
from pathlib import Path

import numpy as np

from pfmsoft.minformer.config import build_section, canonical_text, parse_lines
from pfmsoft.minformer.encoder import ModelConfig, ModelParams
from pfmsoft.minformer.errors import DataFormatError
from pfmsoft.minformer.serializer import check_file

logger = logging.getLogger(__name__)

MAGIC = b"MINF1\n"
_LENGTH = struct.Struct("<Q")
_F64 = np.dtype("<f8")


def _shape_text(shape: tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(d) for d in text.split("x"))


def dumps(config: ModelConfig, params: ModelParams) -> bytes:
    """Encode a config and its params as checkpoint bytes."""
    arrays = params.named_arrays()
    manifest = "\n".join(f"{name} {_shape_text(a.shape)}" for name, a in arrays.items())
    header = f"[config]\n{canonical_text({'model': config})}[manifest]\n{manifest}\n".encode()
    body = b"".join(np.ascontiguousarray(a, dtype=_F64).tobytes() for a in arrays.values())
    return MAGIC + _LENGTH.pack(len(header)) + header + body


def loads(blob: bytes) -> tuple[ModelConfig, ModelParams]:
    """Decode checkpoint bytes.

    Raises:
        DataFormatError: On a bad magic, a malformed header, or a body whose
            length does not match the manifest.
    """
    if not blob.startswith(MAGIC):
        raise DataFormatError(f"not a checkpoint: magic {blob[: len(MAGIC)]!r}")
    offset = len(MAGIC)
    if len(blob) < offset + _LENGTH.size:
        raise DataFormatError("checkpoint truncated before header length")
    (header_len,) = _LENGTH.unpack_from(blob, offset)
    offset += _LENGTH.size
    try:
        header = blob[offset : offset + header_len].decode("utf-8")
        config_text, manifest_text = header.removeprefix("[config]\n").split("[manifest]\n", 1)
    except (UnicodeDecodeError, ValueError) as error:
        raise DataFormatError(f"malformed checkpoint header: {error}") from error
    offset += header_len
    config = build_section(ModelConfig, parse_lines(config_text, "checkpoint"), "model")

    arrays: dict[str, np.ndarray] = {}
    for line in manifest_text.splitlines():
        try:
            name, shape_text = line.rsplit(" ", 1)
            shape = _parse_shape(shape_text)
        except ValueError as error:
            raise DataFormatError(f"malformed checkpoint manifest line {line!r}") from error
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * _F64.itemsize
        if end > len(blob):
            raise DataFormatError(f"checkpoint truncated inside array {name}")
        arrays[name] = np.frombuffer(blob, dtype=_F64, count=count, offset=offset).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(blob):
        raise DataFormatError(f"checkpoint has {len(blob) - offset} trailing bytes")
    return config, ModelParams.from_named(config, arrays)


def save_checkpoint(path: Path, config: ModelConfig, params: ModelParams, overwrite: bool = False) -> None:
    check_file(path_out=path, overwrite=overwrite)
    path.parent.mkdir(exist_ok=True, parents=True)
    path.write_bytes(dumps(config, params))
    logger.debug("wrote checkpoint %s (%d parameters)", path, params.size())


def load_checkpoint(path: Path) -> tuple[ModelConfig, ModelParams]:
    return loads(path.read_bytes())
