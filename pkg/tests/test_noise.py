import io
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rpsde.noise import (GridError, GridSpec, NoiseRangeError, WienerPath, coarsen, dump_path,
                         keyed_normals, load_path, philox4x32, sample_path, shift)

# Random123 known-answer vectors for philox4x32-10
KAT = [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
]


@pytest.mark.parametrize("ctr,key,expected", KAT)
def test_philox_known_answers(ctr, key, expected):
    out = philox4x32(*ctr, *key)
    assert tuple(int(v) for v in out) == expected


def test_sample_path_is_deterministic():
    g = GridSpec(0.0, 0.1, 50)
    a = sample_path(g, 42, 3, dim=2)
    b = sample_path(g, 42, 3, dim=2)
    assert a.increments.tobytes() == b.increments.tobytes()
    c = sample_path(g, 42, 4, dim=2)
    assert not np.array_equal(a.increments, c.increments)


def test_keyed_normals_independent_of_batch_shape():
    cells = np.arange(-7, 30)
    full = keyed_normals(9, np.arange(40), cells, 3)
    for s in (0, 17, 39):
        single = keyed_normals(9, [s], cells[5:9], 3)[0]
        assert single.tobytes() == full[s, 5:9].tobytes()
    # odd dimensions reuse the same pairs as the next even dimension
    assert keyed_normals(9, [2], cells, 2).tobytes() == full[2:3, :, :2].tobytes()


def test_absolute_keying_shares_increments():
    h = 0.25
    long = sample_path(GridSpec(-4.0, h, 32), 1, 0, key_start=GridSpec(-4.0, h, 32).key_index())
    short = sample_path(GridSpec(-1.0, h, 20), 1, 0, key_start=GridSpec(-1.0, h, 20).key_index())
    assert short.increments.tobytes() == long.increments[12:].tobytes()


def test_increment_statistics_per_cell():
    # 10^6 streams, n_cells = 4, h = 0.25
    n, h = 1_000_000, 0.25
    inc = math.sqrt(h) * keyed_normals(2024, np.arange(n), np.arange(4), 1)[..., 0]
    for j in range(4):
        col = inc[:, j]
        assert abs(col.mean()) <= 4e-3
        # chi-square: sd of the sample variance is h*sqrt(2/(n-1))
        assert abs(col.var(ddof=1) - h) <= 3 * h * math.sqrt(2 / (n - 1))


def test_cross_correlation_small():
    z = keyed_normals(3, np.arange(200_000), np.arange(3), 2).reshape(200_000, -1)
    c = np.corrcoef(z, rowvar=False)
    off = c[~np.eye(c.shape[0], dtype=bool)]
    assert np.max(np.abs(off)) < 4 * 3 / math.sqrt(200_000)


def test_shift_zero_and_inverse():
    p = sample_path(GridSpec(0.0, 0.1, 20), 5, 1, key_start=100)
    assert shift(p, 0).increments.tobytes() == p.increments.tobytes()
    back = shift(shift(p, 7), -7)
    assert back.increments.tobytes() == p.increments.tobytes()
    assert shift(p, 7).grid == p.grid


def test_shift_reindexes_pregenerated_increments():
    a, b, c, d, e = 0.1, -0.2, 0.3, 0.4, -0.5
    p = WienerPath(GridSpec(0.0, 1.0, 4), 0, 0, np.array([[a], [b], [c], [d], [e]]))
    np.testing.assert_array_equal(p.increments[:, 0], [a, b, c, d])
    np.testing.assert_array_equal(shift(p, 1, extend=False).increments[:, 0], [b, c, d, e])
    with pytest.raises(NoiseRangeError):
        shift(p, 2, extend=False)
    with pytest.raises(NoiseRangeError):
        shift(p, 2)  # keyless paths cannot be extended


def test_shift_extension_matches_keyed_generation():
    g = GridSpec(0.0, 0.5, 8)
    p = sample_path(g, 11, 2, key_start=0)
    q = shift(p, -5)
    ref = sample_path(g, 11, 2, key_start=-5)
    assert q.increments.tobytes() == ref.increments.tobytes()


def test_coarsen_examples():
    a, b, c, d = 0.5, 0.25, -1.0, 2.0
    p = WienerPath.from_increments(GridSpec(0.0, 0.25, 4), [a, b, c, d])
    np.testing.assert_array_equal(coarsen(p, 2).increments[:, 0], [a + b, c + d])
    assert coarsen(p, 2).grid == GridSpec(0.0, 0.5, 2)
    assert coarsen(p, 1).increments.tobytes() == p.increments.tobytes()
    assert coarsen(p, 4).increments[0, 0] == ((a + b) + c) + d
    with pytest.raises(GridError):
        coarsen(p, 3)


def test_coarsen_full_telescopes_to_endpoint_difference():
    p = sample_path(GridSpec(0.0, 2.0**-6, 64), 3, 0)
    W = np.concatenate([[0.0], np.cumsum(p.increments[:, 0])])
    assert coarsen(p, 64).increments[0, 0] == W[-1]


@settings(max_examples=40, deadline=None)
@given(a=st.sampled_from([1, 2, 4, 8]), b=st.sampled_from([1, 2, 4]), seed=st.integers(0, 2**63),
       stream=st.integers(0, 2**32 - 1))
def test_coarsen_composition_bit_exact(a, b, seed, stream):
    p = sample_path(GridSpec(-1.0, 1 / 64, 64), seed, stream, dim=2)
    assert coarsen(p, a * b).increments.tobytes() == coarsen(coarsen(p, a), b).increments.tobytes()


@settings(max_examples=40, deadline=None)
@given(factor=st.sampled_from([1, 2, 4]), m=st.integers(-6, 6), seed=st.integers(0, 1000))
def test_shift_commutes_with_coarsen(factor, m, seed):
    p = sample_path(GridSpec(0.0, 1 / 32, 32), seed, 0, key_start=0)
    lhs = coarsen(shift(p, m * factor), factor)
    rhs = shift(coarsen(p, factor), m)
    assert lhs.increments.tobytes() == rhs.increments.tobytes()


def test_dump_load_round_trip():
    p = sample_path(GridSpec(-2.0, 0.125, 16), 7, 9, dim=3)
    buf = io.BytesIO()
    dump_path(p, buf)
    raw = buf.getvalue()
    seed, stream, anchor, h, n, d = struct.unpack_from("<QqddQQ", raw, 4)
    assert (seed, stream, anchor, h, n, d) == (7, 9, -2.0, 0.125, 16, 3)
    assert len(raw) == 4 + 48 + 16 * 3 * 8
    q = load_path(io.BytesIO(raw))
    assert q.increments.tobytes() == p.increments.tobytes()
    assert q.grid == p.grid
    with pytest.raises(ValueError):
        load_path(io.BytesIO(raw[:-8]))


def test_grid_validation_and_phases():
    with pytest.raises(GridError):
        GridSpec(0.0, 0.0, 3)
    with pytest.raises(GridError):
        GridSpec.spanning(0.0, 1.0, 0.3)
    g = GridSpec.spanning(-5.0, -4.0, 0.01)
    assert g.n_cells == 100
    assert g.phases(1.0).tobytes() == GridSpec.spanning(0.0, 1.0, 0.01).phases(1.0).tobytes()
    with pytest.raises(GridError):
        g.index_of(-3.0)
    assert g.index_of(-4.5) == 50
