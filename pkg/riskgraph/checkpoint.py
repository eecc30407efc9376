"""Model checkpoint container.

Layout, all integers little-endian:

  8 bytes   magic b"RGRAPHCK"
  uint32    format version
  uint32    header length in bytes
  header    UTF-8 JSON: model config, catalog version and digest, dtype,
            parameter names and shapes in declared order
  payload   raw parameter arrays, concatenated in declared order

"""
import dataclasses
import json
import logging
import struct
import numpy as np
from .catalog import CATALOG
from .exceptions import BadConfig, IncompatibleCheckpoint
from .model import Model, ModelConfig, parameter_shapes


LOGGER = logging.getLogger("riskgraph")

MAGIC = b"RGRAPHCK"
FORMAT_VERSION = 1

DTYPES = {"double": "<f8", "single": "<f4"}

_PREAMBLE = struct.Struct("<8sII")


def save_checkpoint(model, path, precision="double"):
    """Write model to path."""
    if precision not in DTYPES:
        raise BadConfig(f"Unknown checkpoint precision: {precision}")
    dtype = DTYPES[precision]
    header = {
        "format_version": FORMAT_VERSION,
        "catalog_version": CATALOG.version,
        "catalog_digest": CATALOG.digest,
        "dtype": dtype,
        "model_config": dataclasses.asdict(model.config),
        "params": [
            {"name": name, "shape": list(value.shape)}
            for name, value in model.params.items()
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as outfile:
        outfile.write(
            _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes))
        )
        outfile.write(header_bytes)
        for value in model.params.values():
            outfile.write(np.ascontiguousarray(value, dtype=dtype).tobytes())
    LOGGER.debug("%s params=%s dtype=%s", path, len(model.params), dtype)


def _read_header(blob):
    try:
        magic, version, length = _PREAMBLE.unpack_from(blob)
    except struct.error as err:
        raise IncompatibleCheckpoint("Truncated checkpoint") from err
    if magic != MAGIC:
        raise IncompatibleCheckpoint("Not a riskgraph checkpoint")
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpoint(
            f"Checkpoint format {version}, expected {FORMAT_VERSION}"
        )
    start = _PREAMBLE.size
    try:
        header = json.loads(blob[start:start + length].decode("utf-8"))
    except ValueError as err:
        raise IncompatibleCheckpoint(f"Bad checkpoint header: {err}") from err
    if not isinstance(header, dict):
        raise IncompatibleCheckpoint("Checkpoint header is not an object")
    return header, start + length


def load_checkpoint(path):
    """Read a model written by save_checkpoint.

    Parameters come back as float64 whatever the stored precision.

    """
    # pylint: disable=too-many-locals
    try:
        with open(path, "rb") as infile:
            blob = infile.read()
    except OSError as err:
        raise IncompatibleCheckpoint(f"Cannot read {path}: {err}") from err
    header, offset = _read_header(blob)

    if header.get("catalog_digest") != CATALOG.digest:
        raise IncompatibleCheckpoint(
            f"Checkpoint built for catalog version "
            f"{header.get('catalog_version')}, have {CATALOG.version}"
        )
    dtype = header.get("dtype")
    if dtype not in DTYPES.values():
        raise IncompatibleCheckpoint(f"Unknown dtype: {dtype}")
    try:
        config = ModelConfig(**header["model_config"])
        entries = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    except (KeyError, TypeError, BadConfig) as err:
        raise IncompatibleCheckpoint(f"Bad checkpoint header: {err}") from err
    if entries != list(parameter_shapes(config).items()):
        raise IncompatibleCheckpoint("Parameter layout does not match config")

    itemsize = np.dtype(dtype).itemsize
    params = {}
    for name, shape in entries:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * itemsize
        if end > len(blob):
            raise IncompatibleCheckpoint(f"Truncated checkpoint at {name}")
        params[name] = np.frombuffer(
            blob, dtype=dtype, count=count, offset=offset
        ).astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob):
        raise IncompatibleCheckpoint("Trailing bytes after parameters")
    LOGGER.debug("%s loaded %s params", path, len(params))
    return Model(config=config, params=params)
