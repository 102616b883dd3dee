"""Core 2D spectrum types, count/probability normalization and SPX1/CSV I/O.

A spectrum is indexed ``values[i, j]`` with ``i`` the energy row and ``j`` the
momentum column.  Values live in float64 in memory; the SPX1 file stores them
as little-endian float32, which is exact for integer counts below 2**24.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatViolation, IoFailure, ZeroSpectrum

MAGIC = b"SPX1"
_HEADER = struct.Struct("<4sII4d")
_LABEL_LEN = struct.Struct("<H")

PROBABILITY_TOLERANCE = 1e-9


@dataclass(frozen=True)
class AxisInfo:
    label: str
    minimum: float
    maximum: float
    sample_count: int

    def __post_init__(self):
        if not (np.isfinite(self.minimum) and np.isfinite(self.maximum)):
            raise ValueError("axis limits must be finite")
        if not self.minimum < self.maximum:
            raise ValueError(f"axis {self.label!r}: minimum must be < maximum")
        if int(self.sample_count) < 2:
            raise ValueError(f"axis {self.label!r}: sample_count must be >= 2")

    @property
    def values(self) -> np.ndarray:
        return np.linspace(self.minimum, self.maximum, self.sample_count)

    @property
    def step(self) -> float:
        return (self.maximum - self.minimum) / (self.sample_count - 1)

    def index_of(self, x: float) -> float:
        """Fractional pixel index of physical coordinate ``x``."""
        return (x - self.minimum) / self.step


def default_axes(height: int, width: int) -> tuple[AxisInfo, AxisInfo]:
    """Synthetic axes: binding energy -0.3..0.1 eV, momentum -0.5..0.5 1/A."""
    return (AxisInfo("energy", -0.3, 0.1, height),
            AxisInfo("momentum", -0.5, 0.5, width))


@dataclass(frozen=True)
class Spectrum:
    """Immutable 2D intensity grid with physical axes.

    ``signed`` spectra (second-derivative maps, raw network output) may hold
    negative values; all others must be non-negative.
    """

    values: np.ndarray
    energy_axis: AxisInfo
    momentum_axis: AxisInfo
    signed: bool = field(default=False, compare=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim != 2:
            raise ValueError("spectrum values must be 2D")
        if v.shape != (self.energy_axis.sample_count, self.momentum_axis.sample_count):
            raise ValueError(
                f"values shape {v.shape} does not match axes "
                f"({self.energy_axis.sample_count}, {self.momentum_axis.sample_count})")
        if not np.all(np.isfinite(v)):
            raise ValueError("spectrum values must be finite")
        if not self.signed and np.any(v < 0):
            raise ValueError("spectrum values must be non-negative")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def from_array(cls, values, energy_axis=None, momentum_axis=None, signed=False):
        values = np.asarray(values, dtype=np.float64)
        e_ax, k_ax = default_axes(*values.shape)
        return cls(values, energy_axis or e_ax, momentum_axis or k_ax, signed=signed)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def total_count(self) -> float:
        return float(self.values.sum())

    def with_values(self, values, signed=None) -> "Spectrum":
        """Same axes, new payload.  Always returns a plain Spectrum."""
        if signed is None:
            signed = bool(np.any(np.asarray(values) < 0))
        return Spectrum(values, self.energy_axis, self.momentum_axis, signed=signed)

    def __eq__(self, other):
        if not isinstance(other, Spectrum):
            return NotImplemented
        return (self.energy_axis == other.energy_axis
                and self.momentum_axis == other.momentum_axis
                and np.array_equal(self.values, other.values))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ProbabilityMap(Spectrum):
    """Non-negative spectrum whose values sum to one."""

    def __post_init__(self):
        super().__post_init__()
        total = self.values.sum()
        if abs(total - 1.0) > PROBABILITY_TOLERANCE:
            raise ValueError(f"probability map sums to {total!r}, expected 1")
        if np.any(self.values < 0):
            raise ValueError("probability map values must be non-negative")


def normalize_to_probability(s: Spectrum) -> ProbabilityMap:
    """Divide every pixel by the total count so the map sums to one."""
    total = s.values.sum()
    if not total > 0:
        raise ZeroSpectrum("cannot normalize a spectrum with zero total count")
    return ProbabilityMap(s.values / total, s.energy_axis, s.momentum_axis)


# -- SPX1 ------------------------------------------------------------------

def _encode_label(label: str) -> bytes:
    raw = label.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("axis label too long")
    return _LABEL_LEN.pack(len(raw)) + raw


def spectrum_to_bytes(s: Spectrum) -> bytes:
    h, w = s.shape
    e, k = s.energy_axis, s.momentum_axis
    head = _HEADER.pack(MAGIC, h, w, e.minimum, e.maximum, k.minimum, k.maximum)
    payload = np.ascontiguousarray(s.values, dtype="<f4").tobytes()
    return head + _encode_label(e.label) + _encode_label(k.label) + payload


def spectrum_from_bytes(buf: bytes) -> Spectrum:
    if len(buf) < _HEADER.size:
        raise FormatViolation("truncated SPX1 header")
    magic, h, w, emin, emax, kmin, kmax = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatViolation(f"bad magic {magic!r}")
    off = _HEADER.size
    labels = []
    for _ in range(2):
        if len(buf) < off + _LABEL_LEN.size:
            raise FormatViolation("truncated SPX1 label")
        (n,) = _LABEL_LEN.unpack_from(buf, off)
        off += _LABEL_LEN.size
        if len(buf) < off + n:
            raise FormatViolation("truncated SPX1 label")
        try:
            labels.append(buf[off:off + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatViolation("axis label is not UTF-8") from exc
        off += n
    expected = off + 4 * h * w
    if len(buf) != expected:
        raise FormatViolation(f"payload is {len(buf) - off} bytes, expected {4 * h * w}")
    values = np.frombuffer(buf, dtype="<f4", count=h * w, offset=off).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise FormatViolation("non-finite values in payload")
    try:
        e_ax = AxisInfo(labels[0], emin, emax, h)
        k_ax = AxisInfo(labels[1], kmin, kmax, w)
    except ValueError as exc:
        raise FormatViolation(str(exc)) from exc
    values = values.reshape(h, w)
    return Spectrum(values, e_ax, k_ax, signed=bool(np.any(values < 0)))


def save_spectrum(s: Spectrum, path) -> None:
    """Write ``s`` as SPX1, atomically (temp file then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(spectrum_to_bytes(s))
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_spectrum(path) -> Spectrum:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return spectrum_from_bytes(buf)


def spectrum_roundtrip(s: Spectrum, path) -> Spectrum:
    save_spectrum(s, path)
    return load_spectrum(path)


# -- CSV -------------------------------------------------------------------

def export_csv(s: Spectrum, path) -> None:
    e = s.energy_axis.values
    k = s.momentum_axis.values
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["energy", "momentum", "value"])
        for i in range(s.shape[0]):
            for j in range(s.shape[1]):
                writer.writerow([repr(float(e[i])), repr(float(k[j])),
                                 repr(float(s.values[i, j]))])


def import_csv(path, energy_label="energy", momentum_label="momentum") -> Spectrum:
    """Read ``energy,momentum,value`` triples covering a full rectangular grid.

    Grid coordinates must be evenly spaced; rows may appear in any order.
    """
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip().lower() for h in next(reader)]
            rows = [r for r in reader if r]
    except (OSError, StopIteration) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if header != ["energy", "momentum", "value"]:
        raise FormatViolation(f"unexpected CSV header {header}")
    try:
        data = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise FormatViolation(f"non-numeric CSV entry: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != 3:
        raise FormatViolation("each CSV row needs exactly three fields")
    energies = np.unique(data[:, 0])
    momenta = np.unique(data[:, 1])
    h, w = len(energies), len(momenta)
    if h < 2 or w < 2 or len(data) != h * w:
        raise FormatViolation("CSV triples do not form a full grid of at least 2x2")
    grid = np.full((h, w), np.nan)
    grid[np.searchsorted(energies, data[:, 0]), np.searchsorted(momenta, data[:, 1])] = data[:, 2]
    if np.isnan(grid).any():
        raise FormatViolation("duplicate grid points in CSV")
    for name, ax in (("energy", energies), ("momentum", momenta)):
        d = np.diff(ax)
        if not np.allclose(d, d[0], rtol=1e-6, atol=0):
            raise FormatViolation(f"{name} coordinates are not evenly spaced")
    try:
        return Spectrum(grid, AxisInfo(energy_label, energies[0], energies[-1], h),
                        AxisInfo(momentum_label, momenta[0], momenta[-1], w),
                        signed=bool(np.any(grid < 0)))
    except ValueError as exc:
        raise FormatViolation(str(exc)) from exc
