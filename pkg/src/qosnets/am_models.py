"""Behavioral models of 8x8-bit unsigned approximate multipliers.

Every multiplier is stored as a full 256x256 lookup table (row-major, first
operand outer) plus its power relative to the accurate multiplier.  The
``.amlut`` file layout is::

    offset  size     content
    0       6        magic b"AMLUT1"
    6       1        bitwidth (uint8, must be 8)
    7       8        relative power (float64, little endian)
    15      131072   65536 x uint16 little-endian products, entry a*256 + b

The model name is the file stem.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

BITWIDTH = 8
N_CODES = 1 << BITWIDTH
LUT_SIZE = N_CODES * N_CODES
MAGIC = b"AMLUT1"
_HEADER = struct.Struct("<6sBd")
ACCURATE_NAME = "accurate"


class AmLoadError(ValueError):
    """Raised for a malformed multiplier file."""


class AmConflictError(ValueError):
    """Raised when two multipliers in a library share a name."""


def _exact_products() -> np.ndarray:
    a = np.arange(N_CODES, dtype=np.int64)
    return (a[:, None] * a[None, :]).ravel()


@dataclass(frozen=True, eq=False)
class AmModel:
    name: str
    lut: np.ndarray
    relative_power: float
    bitwidth: int = BITWIDTH

    def __post_init__(self):
        if self.bitwidth != BITWIDTH:
            raise ValueError(f"{self.name}: only {BITWIDTH}-bit multipliers are supported")
        lut = np.asarray(self.lut)
        if lut.size != LUT_SIZE:
            raise ValueError(f"{self.name}: LUT must have {LUT_SIZE} entries, got {lut.size}")
        if lut.min() < 0 or lut.max() > 0xFFFF:
            raise ValueError(f"{self.name}: LUT entries must fit in 16 bits")
        if not self.relative_power > 0:
            raise ValueError(f"{self.name}: relative_power must be positive")
        lut = lut.reshape(LUT_SIZE).astype(np.int64)
        lut.flags.writeable = False
        object.__setattr__(self, "lut", lut)
        object.__setattr__(self, "relative_power", float(self.relative_power))

    @property
    def table(self) -> np.ndarray:
        """The LUT as a (256, 256) view indexed ``[a, b]``."""
        return self.lut.reshape(N_CODES, N_CODES)

    @cached_property
    def is_accurate(self) -> bool:
        return bool(np.array_equal(self.lut, _exact_products()))

    def __call__(self, a, b):
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        return self.lut[a * N_CODES + b]


def accurate_am() -> AmModel:
    return AmModel(ACCURATE_NAME, _exact_products(), 1.0)


def make_truncation_am(k: int) -> AmModel:
    """Multiplier that zeroes the ``k`` low bits of both operands."""
    if not isinstance(k, (int, np.integer)) or not 0 <= k <= 7:
        raise ValueError(f"truncation width must be in 0..7, got {k!r}")
    k = int(k)
    a = np.arange(N_CODES, dtype=np.int64)
    t = (a >> k) << k
    lut = (t[:, None] * t[None, :]).ravel()
    return AmModel(f"trunc{k}", lut, ((8 - k) / 8) ** 2)


def error_surface(am: AmModel) -> np.ndarray:
    """Signed error ``lut(a, b) - a*b`` for all operand pairs, flat like the LUT."""
    return am.lut - _exact_products()


def am_summary(am: AmModel) -> tuple[float, float, int]:
    """(mean, std, max |err|) over uniformly distributed operand pairs."""
    err = error_surface(am)
    return float(err.mean()), float(err.std()), int(np.abs(err).max())


@dataclass(frozen=True)
class AmLibrary:
    models: tuple[AmModel, ...] = field(default_factory=tuple)

    def __post_init__(self):
        models = tuple(self.models)
        names = [m.name for m in models]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise AmConflictError(f"duplicate multiplier names: {dup}")
        if not models or not models[0].is_accurate:
            raise ValueError("index 0 of a library must be the accurate multiplier")
        if any(m.is_accurate for m in models[1:]):
            raise ValueError("library may contain only one accurate multiplier")
        object.__setattr__(self, "models", models)

    @classmethod
    def from_models(cls, models) -> "AmLibrary":
        """Library of ``models`` with the accurate multiplier prepended.

        Exact multipliers among ``models`` (e.g. trunc0) are dropped, so index 0
        is always the only accurate instance.
        """
        rest = sorted((m for m in models if not m.is_accurate), key=lambda m: m.name)
        return cls((accurate_am(), *rest))

    def __len__(self):
        return len(self.models)

    def __getitem__(self, i) -> AmModel:
        return self.models[i]

    def __iter__(self):
        return iter(self.models)

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.models]

    @property
    def powers(self) -> np.ndarray:
        return np.array([m.relative_power for m in self.models])

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no multiplier named {name!r} in library") from None

    def by_name(self, name: str) -> AmModel:
        return self.models[self.index(name)]


def save_am(am: AmModel, directory) -> Path:
    path = Path(directory) / f"{am.name}.amlut"
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, am.bitwidth, am.relative_power))
        f.write(am.lut.astype("<u2").tobytes())
    return path


def load_am(path) -> AmModel:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise AmLoadError(f"{path}: file too short for header")
    magic, bitwidth, power = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise AmLoadError(f"{path}: bad magic {magic!r}")
    if bitwidth != BITWIDTH:
        raise AmLoadError(f"{path}: unsupported bitwidth {bitwidth}")
    body = raw[_HEADER.size:]
    if len(body) < 2 * LUT_SIZE:
        raise AmLoadError(f"{path}: truncated LUT ({len(body) // 2} of {LUT_SIZE} entries)")
    if len(body) > 2 * LUT_SIZE:
        raise AmLoadError(f"{path}: trailing data after LUT")
    lut = np.frombuffer(body, dtype="<u2")
    try:
        return AmModel(path.stem, lut, power)
    except ValueError as e:
        raise AmLoadError(f"{path}: {e}") from None


def load_am_library(directory) -> AmLibrary:
    """Load every ``*.amlut`` in ``directory``; the accurate model is always index 0."""
    directory = Path(directory)
    models = [load_am(p) for p in sorted(directory.glob("*.amlut"))]
    names = [m.name for m in models]
    if ACCURATE_NAME in names or len(set(names)) != len(names):
        raise AmConflictError(f"{directory}: duplicate multiplier name in {names}")
    exact = [m.name for m in models if m.is_accurate]
    if exact:
        raise AmConflictError(f"{directory}: {exact} duplicate the accurate multiplier")
    return AmLibrary.from_models(models)


def truncation_library(ks=range(1, 6)) -> AmLibrary:
    return AmLibrary.from_models([make_truncation_am(k) for k in ks])
