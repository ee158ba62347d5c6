from __future__ import annotations

import io
import itertools
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.stats import qmc

from rqmclab import lds
from rqmclab.errors import CapacityError, DirectionFileError

HEADER = "d s a m_i\n"


def test_bundled_table_record_for_dimension_two():
    dirs = lds.load_direction_numbers(max_dim=3)
    rec = dirs.records[0]
    assert (rec.dim, rec.degree, rec.poly, rec.m) == (2, 1, 0, (1,))
    assert dirs.records[1].m == (1, 3)


def test_parse_record_from_bytes():
    dirs = lds.load_direction_numbers((HEADER + "2 1 0 1\n").encode())
    assert dirs.dimension_count == 2
    assert dirs.records[0].m == (1,)


def test_dimension_one_needs_no_record():
    dirs = lds.load_direction_numbers(io.StringIO(HEADER))
    gen = lds.SobolGenerator(1, dirs)
    assert np.all(gen.matrices[0] == [1 << (32 - k) for k in range(1, 33)])


@pytest.mark.parametrize(
    "record, fragment",
    [
        ("2 1 0 2", "even"),
        ("2 2 2 1 3", "polynomial"),
        ("2 1 0 3", "below 2^1"),
        ("2 2 1 1", "degree 2 but 1"),
        ("3 1 0 1", "expected dimension 2"),
        ("2 1 x 1", "non-integer"),
    ],
)
def test_malformed_records_report_line(record, fragment):
    with pytest.raises(DirectionFileError) as info:
        lds.load_direction_numbers(io.StringIO(HEADER + record + "\n"))
    assert info.value.line == 2
    assert fragment in str(info.value)


def test_capacity_error():
    dirs = lds.load_direction_numbers(io.StringIO(HEADER + "2 1 0 1\n"))
    with pytest.raises(CapacityError):
        lds.SobolGenerator(3, dirs)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(DirectionFileError):
        lds.load_direction_numbers(tmp_path / "absent.txt")


def test_env_var_selects_table(tmp_path, monkeypatch):
    path = tmp_path / "dirs.txt"
    path.write_text(HEADER + "2 1 0 1\n")
    monkeypatch.setenv(lds.DIRS_ENV, str(path))
    assert lds.load_direction_numbers().dimension_count == 2


def test_generating_matrices_are_unit_upper_triangular():
    # column k touches digits 1..k only, with digit k set
    gen = lds.SobolGenerator(8)
    for k in range(1, 33):
        col = gen.matrices[:, k - 1].astype(np.uint64)
        assert np.all((col >> np.uint64(32 - k)) & np.uint64(1) == 1)
        assert np.all(col & np.uint64((1 << (32 - k)) - 1) == 0)


@pytest.mark.parametrize("s", [1, 2, 5, 21])
@pytest.mark.parametrize("m", [4, 9])
def test_point_sets_match_reference_implementation(s, m):
    ref = qmc.Sobol(s, scramble=False).random(2 ** m)
    ours = lds.SobolGenerator(s).digits(2 ** m).astype(float) / 2 ** 32
    key = lambda a: sorted(map(tuple, a))
    assert key(ours) == key(ref)


def test_index_zero_is_origin_clamped():
    gen = lds.SobolGenerator(4)
    assert np.all(gen.digits(1) == 0)
    assert np.all(gen.point(0) == lds.CLAMP_LO)
    assert lds.CLAMP_LO == 2.0 ** -64


def test_index_one_unscrambled_and_identity_scramble():
    gen = lds.SobolGenerator(2)
    assert np.all(gen.point(1) == 0.5)
    ident = lds.ScrambleState.identity(2)
    assert np.all(gen.point(1, ident) == 0.5 + 2.0 ** -33)


def test_identity_scramble_adds_half_ulp_only():
    gen = lds.SobolGenerator(3)
    plain = gen.digits(64).astype(float) / 2 ** 32
    ident = gen.points(64, lds.ScrambleState.identity(3))
    assert np.array_equal(ident, np.clip(plain + 2.0 ** -33, lds.CLAMP_LO, lds.CLAMP_HI))


def test_index_overflow():
    gen = lds.SobolGenerator(1)
    with pytest.raises(OverflowError):
        gen.point(2 ** 32)
    with pytest.raises(OverflowError):
        gen.point(-1)


def test_coordinates_stay_inside_open_interval():
    gen = lds.SobolGenerator(3)
    for r in range(5):
        p = gen.points(1024, lds.fresh_scramble(9, r, 3))
        assert p.min() >= lds.CLAMP_LO and p.max() < 1.0


def test_digits_at_offset_match_prefix():
    gen = lds.SobolGenerator(3)
    full = gen.digits(300)
    assert np.array_equal(gen.digits(100, start=200), full[200:])


def test_fresh_scramble_is_deterministic():
    a = lds.fresh_scramble(42, 3, 5)
    b = lds.fresh_scramble(42, 3, 5)
    assert np.array_equal(a.columns, b.columns) and np.array_equal(a.shift, b.shift)


def test_replicates_and_streams_differ():
    a = lds.fresh_scramble(42, 0, 4)
    b = lds.fresh_scramble(42, 1, 4)
    c = lds.fresh_scramble(42, 0, 4, stream=lds.STREAM_PILOT)
    assert not np.array_equal(a.shift, b.shift)
    assert not np.array_equal(a.shift, c.shift)


def test_state_per_dimension_is_independent_of_total_dimension():
    small = lds.fresh_scramble(7, 2, 2)
    large = lds.fresh_scramble(7, 2, 6)
    assert np.array_equal(small.columns, large.columns[:2])
    assert np.array_equal(small.shift, large.shift[:2])


def test_scramble_matrix_is_unit_lower_triangular():
    m = lds.fresh_scramble(1, 0, 1).matrix(0)
    assert np.all(np.diag(m) == 1)
    assert np.all(np.triu(m, 1) == 0)


def _gf2_apply(mat: np.ndarray, shift: int, x: int) -> int:
    bits = np.array([(x >> (31 - k)) & 1 for k in range(32)], dtype=np.uint8)
    y = mat.astype(int) @ bits % 2
    return int(sum(int(b) << (31 - k) for k, b in enumerate(y))) ^ shift


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 63), x=st.integers(0, 2 ** 32 - 1))
def test_byte_tables_match_dense_bit_matrix(seed, x):
    state = lds.fresh_scramble(seed, 0, 1)
    got = int(state.apply(np.array([[x]], dtype=np.uint32))[0, 0])
    assert got == _gf2_apply(state.matrix(0), int(state.shift[0]), x)


def test_shift_marginal_is_uniform():
    # each replicate draws a fresh scramble; the image of a fixed point is uniform on the grid
    gen = lds.SobolGenerator(1)
    x = gen.digits(1, start=5)
    draws = np.array([int(lds.fresh_scramble(2024, r, 1).apply(x)[0, 0]) for r in range(2 ** 16)])
    counts = np.bincount(draws >> 24, minlength=256)
    assert stats.chisquare(counts).pvalue > 0.001
    low = np.bincount(draws & 0xFF, minlength=256)
    assert stats.chisquare(low).pvalue > 0.001


def _t_value(digits: np.ndarray, m: int) -> int:
    """Smallest t such that every elementary interval of volume 2^(t-m) holds 2^t points."""
    s = digits.shape[1]
    for t in range(m + 1):
        ok = True
        for ks in itertools.product(range(m - t + 1), repeat=s):
            if sum(ks) != m - t:
                continue
            cell = np.zeros(len(digits), dtype=np.int64)
            for j, k in enumerate(ks):
                cell = (cell << k) | (digits[:, j].astype(np.int64) >> (32 - k) if k else 0)
            counts = np.bincount(cell, minlength=2 ** (m - t))
            if not np.all(counts == 2 ** t):
                ok = False
                break
        if ok:
            return t
    return m


# published quality parameters of the first Sobol' dimensions
PUBLISHED_T = {1: 0, 2: 0, 3: 1}


@pytest.mark.parametrize("s", [1, 2, 3])
def test_net_balance(s):
    gen = lds.SobolGenerator(s)
    for m in range(1, 9):
        assert _t_value(gen.digits(2 ** m), m) <= PUBLISHED_T[s]


@pytest.mark.parametrize("s", [2, 3])
def test_scramble_preserves_net_balance(s):
    gen = lds.SobolGenerator(s)
    for r in range(3):
        state = lds.fresh_scramble(11, r, s)
        for m in (4, 8):
            assert _t_value(state.apply(gen.digits(2 ** m)), m) <= PUBLISHED_T[s]


def test_randomized_average_is_unbiased():
    s, n, R = 2, 256, 200
    gen = lds.SobolGenerator(s)
    f = lambda t: np.exp(t[:, 0]) * (1 + t[:, 1] ** 2)
    exact = (np.e - 1) * (4 / 3)
    means = np.array([f(gen.points(n, lds.fresh_scramble(3, r, s))).mean() for r in range(R)])
    se = means.std(ddof=1) / np.sqrt(R)
    assert abs(means.mean() - exact) <= 4 * se


def test_thread_safety_of_shared_generator():
    gen = lds.SobolGenerator(3)
    states = [lds.fresh_scramble(5, r, 3) for r in range(8)]
    serial = [gen.points(512, st_) for st_ in states]
    with ThreadPoolExecutor(4) as pool:
        threaded = list(pool.map(lambda st_: gen.points(512, st_), states))
    assert all(np.array_equal(a, b) for a, b in zip(serial, threaded))


def test_randomized_point_set_caches():
    gen = lds.SobolGenerator(2)
    rps = lds.RandomizedPointSet(gen, lds.fresh_scramble(0, 0, 2), 16)
    assert rps.points() is rps.points()
    assert rps.points().shape == (16, 2)
