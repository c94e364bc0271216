import enum, re, struct
from typing import Optional, Sequence, Tuple

import numpy as np


def _indent(s):
    return re.sub(r'^', '    ', s, flags=re.MULTILINE)


def _format_items(items, brackets):
    open_, close = brackets
    if any('\n' in item for item in items):
        return open_ + '\n' + ',\n'.join(_indent(item) for item in items) + close
    return open_ + ', '.join(items) + close


def _format(obj):
    if isinstance(obj, float):
        return '%.04g' % obj
    elif isinstance(obj, np.ndarray):
        if obj.size > 8:
            return 'array%s' % (tuple(obj.shape),)
        return np.array2string(obj, precision=4, separator=', ')
    elif isinstance(obj, (tuple, list)):
        return _format_items([_format(x) for x in obj], '()' if isinstance(obj, tuple) else '[]')
    elif isinstance(obj, dict):
        if len(obj) > 8:
            return '{...}(%d)' % len(obj)
        return _format_items(['%s: %s' % (k, _format(v)) for k, v in obj.items()], '{}')
    elif isinstance(obj, enum.Enum):
        return repr(obj)
    else:
        return str(obj)


def unpack(fmt, stream):
    fmt = '>' + fmt
    size = struct.calcsize(fmt)
    data = stream.read(size)
    if len(data) < size:
        raise EOFError()
    return struct.unpack(fmt, data)


def pack(fmt, *values):
    return struct.pack('>' + fmt, *values)


def expect_bytes(expected_bytes, stream):
    read_bytes = stream.read(len(expected_bytes))
    if read_bytes != expected_bytes:
        raise CheckpointError(f'expected {expected_bytes!r}, but got: {read_bytes!r}')


class Base:
    __slots__: Tuple = ()

    def _attr_repr(self, attr):
        return attr + '=' + _format(getattr(self, attr))

    def __repr__(self):
        attrs = []
        for attr in dir(self):
            # uppercase names are nested classes
            if not (attr.startswith('_') or attr[0].isupper()):
                value = getattr(self, attr)
                if callable(value) and not isinstance(value, (np.ndarray, enum.Enum)):
                    continue
                s = self._attr_repr(attr)
                if s:
                    attrs.append(_indent(s))

        return '%s(\n%s)' % (self.__class__.__name__, ',\n'.join(attrs))


class Enum(enum.Enum):
    def __repr__(self):
        return '%r:%s' % (self._value_, self._name_)

    @classmethod
    def _missing_(cls, value):
        raise ConfigError(f'{value!r} is not a valid {cls.__name__} (expected one of: {", ".join(repr(m.value) for m in cls)})')


class NatPnError(Exception):
    """Root of every error raised by this package."""


class DimensionError(NatPnError, ValueError):
    def __init__(self, message: str, *shapes: Sequence[int]):
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)

    def __str__(self):
        return '%s: %s' % (super().__str__(), ' vs '.join(str(s) for s in self.shapes))


class DomainError(NatPnError, ValueError):
    """A value lies outside the domain of a function or violates a parameter constraint."""


class ContractError(NatPnError, ValueError):
    """A caller broke a documented precondition."""


class ConfigError(NatPnError, ValueError):
    pass


class NumericError(NatPnError, ArithmeticError):
    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.stage = stage

    def __str__(self):
        return 'Numeric error (%s): %s' % (self.stage or '?', super().__str__())


class TrainingError(NatPnError, RuntimeError):
    def __init__(self, message: str, parameter: Optional[str] = None, checkpoint: Optional[dict] = None):
        super().__init__(message)
        self.parameter = parameter
        self.checkpoint = checkpoint #: last finite parameter state, by name


class _FileError(NatPnError, IOError):
    # OSError.__str__ ignores the message once filename is set
    @property
    def message(self) -> str:
        return str(self.args[0]) if self.args else ''


class IngestionError(_FileError):
    def __init__(self, message, filename = None, row = None, column = None):
        super().__init__(message)
        self.filename = filename
        self.row = row
        self.column = column

    def __str__(self):
        return 'Ingestion error (%s row %s, column %s): %s' % (
            self.filename or '?',
            self.row if self.row is not None else '?',
            self.column if self.column is not None else '?',
            self.message)


class CheckpointError(_FileError):
    def __init__(self, message, filename = None, pos = None):
        super().__init__(message)
        self.filename = filename
        self.pos = pos

    def __str__(self):
        return 'Checkpoint error (%s %s): %s' % (
            self.filename or '?',
            '@0x%x' % self.pos if self.pos else '?',
            self.message)


class EOFError(CheckpointError):
    def __init__(self):
        super().__init__('unexpected end of file')
