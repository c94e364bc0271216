"""Binary checkpoint container.

Layout (all integers big-endian)::

    magic      8 bytes   b'NATPNCKP'
    version    uint16
    header     uint32 length + UBJSON document {config, meta, tensors: [[name, shape], ...]}
    tensors    for each header entry, in order:
                   uint16 name length, UTF-8 name, uint8 ndim, uint32 * ndim shape,
                   float64 big-endian data

Writing the same model and metadata twice gives identical bytes."""

from __future__ import annotations

import io, os, pathlib
from typing import Any, BinaryIO, Dict, Optional, Tuple, Union

import numpy as np
import ubjson

from .log import log
from .model import NatPnConfig, NatPnModel
from .util import *


MAGIC = b'NATPNCKP'
VERSION = 1


class Checkpoint(Base):
    model: NatPnModel
    meta: Dict[str, Any] #: Run metadata: seed, dataset name, target statistics

    def __init__(self, model: NatPnModel, meta: Optional[Dict[str, Any]] = None):
        self.model = model
        self.meta = meta or {}


def _write(model: NatPnModel, meta: Dict[str, Any], stream: BinaryIO) -> None:
    state = model.state_dict()
    header = {
        'config': model.config.to_dict(),
        'meta': meta,
        'tensors': [[name, list(value.shape)] for name, value in state.items()]}
    header_bytes = ubjson.dumpb(header, sort_keys=True)

    stream.write(MAGIC)
    stream.write(pack('H', VERSION))
    stream.write(pack('I', len(header_bytes)))
    stream.write(header_bytes)
    for name, value in state.items():
        encoded = name.encode('utf-8')
        stream.write(pack('H', len(encoded)))
        stream.write(encoded)
        stream.write(pack('B', value.ndim))
        for size in value.shape:
            stream.write(pack('I', size))
        stream.write(np.ascontiguousarray(value, dtype='>f8').tobytes())


def _read_tensor(stream, expected_name, expected_shape):
    (length,) = unpack('H', stream)
    name = stream.read(length).decode('utf-8')
    if name != expected_name:
        raise CheckpointError(f'expected tensor {expected_name}, but got: {name}')
    (ndim,) = unpack('B', stream)
    shape = unpack('I' * ndim, stream) if ndim else ()
    if list(shape) != list(expected_shape):
        raise CheckpointError(f'tensor {name} has shape {shape}, header says {tuple(expected_shape)}')
    count = int(np.prod(shape, dtype=np.int64))
    data = stream.read(8 * count)
    if len(data) < 8 * count:
        raise EOFError()
    return np.frombuffer(data, dtype='>f8').astype(np.float64).reshape(shape)


def _read(stream) -> Checkpoint:
    expect_bytes(MAGIC, stream)
    (version,) = unpack('H', stream)
    if version != VERSION:
        raise CheckpointError(f'unsupported checkpoint version {version}')

    (length,) = unpack('I', stream)
    header_bytes = stream.read(length)
    if len(header_bytes) < length:
        raise EOFError()
    try:
        header = ubjson.loadb(header_bytes)
        config = NatPnConfig.from_dict(header['config'])
        entries = header['tensors']
    except (ubjson.DecoderException, KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f'bad header: {e}') from None

    state = {name: _read_tensor(stream, name, shape) for name, shape in entries}
    if stream.read(1):
        raise CheckpointError('trailing bytes after last tensor')

    model = NatPnModel(config)
    try:
        model.load_state_dict(state)
    except (ContractError, DimensionError) as e:
        raise CheckpointError(str(e)) from None
    log.debug('loaded checkpoint with %d tensors', len(state))
    return Checkpoint(model, header.get('meta') or {})


def _read_try(input: BinaryIO) -> Checkpoint:
    """Wrap decoding exceptions with the file name and position."""

    try:
        return _read(input)
    except Exception as e:
        e = e if isinstance(e, CheckpointError) else CheckpointError(str(e))

        try: e.filename = input.name # type: ignore
        except AttributeError: pass

        try:
            if not e.pos and input.seekable():
                e.pos = input.tell()
        except (AttributeError, ValueError): pass

        raise e


def dumps(model: NatPnModel, meta: Optional[Dict[str, Any]] = None) -> bytes:
    out = io.BytesIO()
    _write(model, meta or {}, out)
    return out.getvalue()


def save(model: NatPnModel, output: Union[BinaryIO, str, os.PathLike], meta: Optional[Dict[str, Any]] = None) -> None:
    """Write ``model`` and JSON-compatible ``meta`` to a file path or binary stream."""
    data = dumps(model, meta)
    if isinstance(output, (str, os.PathLike)):
        pathlib.Path(output).write_bytes(data)
    else:
        output.write(data)


def load(input: Union[BinaryIO, str, os.PathLike, bytes]) -> Checkpoint:
    """Read a checkpoint from a file path, binary stream or bytes.

    :raises CheckpointError: on any malformed content, with file name and byte offset"""
    if isinstance(input, bytes):
        return _read_try(io.BytesIO(input))
    elif isinstance(input, (str, os.PathLike)):
        try:
            f = open(input, 'rb')
        except OSError as e:
            raise CheckpointError(e.strerror or str(e), filename=str(input)) from None
        with f:
            return _read_try(f)
    else:
        return _read_try(input)
