"""Two-sided Brownian increments on equidistant grids.

Increments are drawn from a counter-based generator (Philox-4x32-10 followed by
Box-Muller), keyed by ``(seed, stream, cell, component)``.  Every increment is a
pure function of its key, so any window of any path can be regenerated
bit-for-bit, in any order and in any batch shape.  Cell indices are absolute:
cell ``i`` covers ``[i*h, (i+1)*h)`` relative to the global time origin, which is
what lets pull-back runs started at different times share one realisation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridError",
    "GridSpec",
    "NoiseRangeError",
    "WienerPath",
    "coarsen",
    "coarsen_increments",
    "dump_path",
    "keyed_normals",
    "load_path",
    "philox4x32",
    "sample_path",
    "shift",
]

_MASK32 = np.uint64(0xFFFFFFFF)
_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = np.uint64(0x9E3779B9)
_PHILOX_W1 = np.uint64(0xBB67AE85)
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 2.0**-53


class GridError(ValueError):
    """Grid parameters are inconsistent (misalignment, non-divisibility)."""


class NoiseRangeError(IndexError):
    """A shift left the pre-generated increment range and extension is off."""


def as_integer(value: float, what: str, rtol: float = 1e-9) -> int:
    """Return ``value`` as an int if it is integral up to ``rtol``, else raise."""
    r = round(value)
    if abs(value - r) > rtol * max(1.0, abs(value)):
        raise GridError(f"{what} must be an integer, got {value!r}")
    return int(r)


@dataclass(frozen=True)
class GridSpec:
    """Equidistant grid ``anchor + j*h`` for ``j = 0..n_cells``."""

    anchor: float
    h: float
    n_cells: int

    def __post_init__(self):
        if not self.h > 0:
            raise GridError(f"step must be positive, got {self.h!r}")
        if self.n_cells < 1:
            raise GridError(f"n_cells must be >= 1, got {self.n_cells!r}")

    @classmethod
    def spanning(cls, t0: float, t1: float, h: float) -> "GridSpec":
        n = as_integer((t1 - t0) / h, f"(t1 - t0)/h for [{t0}, {t1}], h={h}")
        return cls(float(t0), float(h), n)

    @property
    def end(self) -> float:
        return self.anchor + self.n_cells * self.h

    @property
    def times(self) -> np.ndarray:
        return self.anchor + np.arange(self.n_cells + 1) * self.h

    def key_index(self) -> int:
        """Absolute index of the first cell, ``anchor / h``."""
        return as_integer(self.anchor / self.h, f"anchor/h (anchor={self.anchor}, h={self.h})")

    def index_of(self, t: float) -> int:
        j = as_integer((t - self.anchor) / self.h, f"grid index of t={t}")
        if not 0 <= j <= self.n_cells:
            raise GridError(f"t={t} outside grid [{self.anchor}, {self.end}]")
        return j

    def phases(self, tau: float) -> np.ndarray:
        """Grid times reduced modulo ``tau``.

        When both ``tau/h`` and ``anchor/h`` are integers the reduction is done
        on integer indices, so grids that differ by whole periods produce
        bit-identical phases.
        """
        n = self.n_cells + 1
        try:
            per = as_integer(tau / self.h, "tau/h")
            start = as_integer(self.anchor / self.h, "anchor/h")
        except GridError:
            return np.mod(self.anchor + np.arange(n) * self.h, tau)
        return np.mod(start + np.arange(n, dtype=np.int64), per) * self.h


def philox4x32(c0, c1, c2, c3, k0, k1, rounds: int = 10):
    """Vectorised Philox-4x32 bijection.

    All arguments are uint64 arrays (or scalars) holding 32-bit words; the four
    returned arrays hold 32-bit words as uint64.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) for c in (c0, c1, c2, c3))
    k0 = np.asarray(k0, dtype=np.uint64)
    k1 = np.asarray(k1, dtype=np.uint64)
    for _ in range(rounds):
        p0 = _PHILOX_M0 * c0
        p1 = _PHILOX_M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> np.uint64(32)) ^ c1 ^ k0,
            p1 & _MASK32,
            (p0 >> np.uint64(32)) ^ c3 ^ k1,
            p0 & _MASK32,
        )
        k0 = (k0 + _PHILOX_W0) & _MASK32
        k1 = (k1 + _PHILOX_W1) & _MASK32
    return c0, c1, c2, c3


def _split64(values) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(values, dtype=np.int64).astype(np.uint64)
    return v & _MASK32, v >> np.uint64(32)


def keyed_normals(seed: int, streams, cells, dim: int) -> np.ndarray:
    """Standard normals for every (stream, cell, component) combination.

    Returns an array of shape ``(len(streams), len(cells), dim)``.  Each entry
    depends only on ``(seed, stream, cell, component)``.
    """
    streams = np.atleast_1d(np.asarray(streams, dtype=np.int64))
    cells = np.atleast_1d(np.asarray(cells, dtype=np.int64))
    n_pairs = (dim + 1) // 2
    seed_u = int(seed) & 0xFFFFFFFFFFFFFFFF
    k0 = np.uint64(seed_u & 0xFFFFFFFF)
    k1 = np.uint64(seed_u >> 32)

    c0, c1 = _split64(cells)
    if streams.size and (streams.min() < 0 or streams.max() > 0xFFFFFFFF):
        raise ValueError("stream ids must fit in 32 unsigned bits")
    c2 = streams.astype(np.uint64)
    pair = np.arange(n_pairs, dtype=np.uint64)
    shape = (streams.size, cells.size, n_pairs)
    c0 = np.broadcast_to(c0[None, :, None], shape)
    c1 = np.broadcast_to(c1[None, :, None], shape)
    c2 = np.broadcast_to(c2[:, None, None], shape)
    c3 = np.broadcast_to(pair[None, None, :], shape)

    x0, x1, x2, x3 = philox4x32(c0, c1, c2, c3, k0, k1)
    m1 = (x0 << np.uint64(21)) | (x1 >> np.uint64(11))
    m2 = (x2 << np.uint64(21)) | (x3 >> np.uint64(11))
    u1 = (m1.astype(np.float64) + 0.5) * _INV_2_53
    u2 = (m2.astype(np.float64) + 0.5) * _INV_2_53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = _TWO_PI * u2
    z = np.empty(shape[:2] + (2 * n_pairs,))
    z[..., 0::2] = r * np.cos(theta)
    z[..., 1::2] = r * np.sin(theta)
    return z[..., :dim]


def coarsen_increments(increments: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` cells along axis ``-2``.

    Summation is a running sum in ascending cell order, independent of any
    leading batch dimensions.
    """
    n = increments.shape[-2]
    if factor < 1 or n % factor:
        raise GridError(f"factor {factor} does not divide {n} cells")
    if factor == 1:
        return increments.copy()
    blocks = increments.reshape(increments.shape[:-2] + (n // factor, factor, increments.shape[-1]))
    return np.cumsum(blocks, axis=-2)[..., -1, :]


@dataclass(frozen=True, eq=False)
class WienerPath:
    """Brownian increments on ``grid``.

    The path is a view onto an underlying array of *base* increments: cell
    ``j`` of the path is the sum of base cells
    ``base_offset + j*fine_factor .. base_offset + (j+1)*fine_factor - 1``.
    ``key_start`` is the absolute key index of ``base[0]``; ``None`` marks a
    path that cannot be regenerated from keys.
    """

    grid: GridSpec
    seed: int
    stream_id: int
    base: np.ndarray
    base_offset: int = 0
    fine_factor: int = 1
    key_start: int | None = None
    increments: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        lo = self.base_offset
        hi = lo + self.grid.n_cells * self.fine_factor
        if lo < 0 or hi > self.base.shape[0]:
            raise NoiseRangeError(
                f"path needs base cells [{lo}, {hi}) but only [0, {self.base.shape[0]}) exist"
            )
        inc = coarsen_increments(self.base[lo:hi], self.fine_factor)
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @classmethod
    def from_increments(cls, grid: GridSpec, increments, seed: int = 0, stream_id: int = 0) -> "WienerPath":
        inc = np.array(increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        return cls(grid, seed, stream_id, inc)

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    @property
    def base_h(self) -> float:
        return self.grid.h / self.fine_factor


def sample_path(grid: GridSpec, seed: int, stream_id: int, dim: int = 1, key_start: int = 0) -> WienerPath:
    """Generate the keyed path on ``grid``.

    ``key_start`` is the absolute index of the grid's first cell; pass
    ``grid.key_index()`` when several grids must share one realisation.
    """
    cells = key_start + np.arange(grid.n_cells, dtype=np.int64)
    base = np.sqrt(grid.h) * keyed_normals(seed, [stream_id], cells, dim)[0]
    return WienerPath(grid, seed, stream_id, base, 0, 1, key_start)


def shift(path: WienerPath, m_cells: int, extend: bool = True) -> WienerPath:
    """Wiener shift by ``m_cells`` cells: increment ``j`` becomes increment ``j + m_cells``.

    The grid is unchanged; only the noise moves.
    """
    offset = path.base_offset + m_cells * path.fine_factor
    need = path.grid.n_cells * path.fine_factor
    if 0 <= offset and offset + need <= path.base.shape[0]:
        return WienerPath(path.grid, path.seed, path.stream_id, path.base, offset,
                          path.fine_factor, path.key_start)
    if not extend or path.key_start is None:
        raise NoiseRangeError(f"shift by {m_cells} cells leaves the generated range")
    start = path.key_start + offset
    cells = start + np.arange(need, dtype=np.int64)
    base = np.sqrt(path.base_h) * keyed_normals(path.seed, [path.stream_id], cells, path.dim)[0]
    return WienerPath(path.grid, path.seed, path.stream_id, base, 0, path.fine_factor, start)


def coarsen(path: WienerPath, factor: int) -> WienerPath:
    """Merge every ``factor`` consecutive cells into one."""
    if factor < 1 or path.grid.n_cells % factor:
        raise GridError(f"factor {factor} does not divide {path.grid.n_cells} cells")
    grid = GridSpec(path.grid.anchor, path.grid.h * factor, path.grid.n_cells // factor)
    return WienerPath(grid, path.seed, path.stream_id, path.base, path.base_offset,
                      path.fine_factor * factor, path.key_start)


_HEADER = struct.Struct("<4sQqddQQ")
_MAGIC = b"WPT1"


def dump_path(path: WienerPath, fh) -> None:
    """Write the path's increments to a binary file object.

    Header: seed, stream_id, anchor, h, n_cells, d; payload: little-endian
    float64 increments, row-major.
    """
    g = path.grid
    fh.write(_HEADER.pack(_MAGIC, int(path.seed) & 0xFFFFFFFFFFFFFFFF, path.stream_id,
                          g.anchor, g.h, g.n_cells, path.dim))
    fh.write(np.ascontiguousarray(path.increments, dtype="<f8").tobytes())


def load_path(fh) -> WienerPath:
    magic, seed, stream_id, anchor, h, n_cells, dim = _HEADER.unpack(fh.read(_HEADER.size))
    if magic != _MAGIC:
        raise ValueError("not a Wiener path dump")
    payload = fh.read(8 * n_cells * dim)
    if len(payload) != 8 * n_cells * dim:
        raise ValueError("truncated Wiener path dump")
    inc = np.frombuffer(payload, dtype="<f8").reshape(n_cells, dim).astype(float)
    return WienerPath.from_increments(GridSpec(anchor, h, n_cells), inc, seed, stream_id)
