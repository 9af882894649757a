import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from picosync.timebase import (
    DIFF_LIMIT_FS,
    TimebaseError,
    TimeOverflowError,
    Timestamp,
    add_fs,
    argsort_arrays,
    diff_fs,
    diff_fs_arrays,
    floor_key,
    from_relative_fs,
    is_sorted_arrays,
    normalize,
    normalize_arrays,
    relative_fs,
)

P = 5_000_000


def test_normalize_carries_one_period():
    assert normalize(Timestamp(3, 7_000_000), P) == Timestamp(4, 2_000_000)


def test_normalize_identity():
    assert normalize(Timestamp(3, 0), P) == Timestamp(3, 0)


def test_normalize_borrows_one_period():
    assert normalize(Timestamp(1, -6_000_000), P) == Timestamp(0, -1_000_000)


def test_normalize_before_epoch():
    with pytest.raises(TimebaseError, match="before epoch"):
        normalize(Timestamp(0, -6_000_000), P)


def test_bad_period():
    with pytest.raises(TimebaseError):
        normalize(Timestamp(0, 0), 0)


@pytest.mark.parametrize(
    "a, b, expected",
    [
        (Timestamp(2, 100), Timestamp(2, 100), 0),
        (Timestamp(3, 0), Timestamp(2, 0), 5_000_000),
        (Timestamp(10, -250_000), Timestamp(9, 250_000), 4_500_000),
    ],
)
def test_diff_examples(a, b, expected):
    assert diff_fs(a, b, P) == expected


def test_diff_overflow():
    far = Timestamp(2**62 // P + 1, 0)
    with pytest.raises(TimeOverflowError):
        diff_fs(far, Timestamp(0, 0), P)


def test_24h_at_200mhz_is_exact():
    slots = 24 * 3600 * 200_000_000
    t = Timestamp(slots, 1)
    assert t.absolute_fs(P) == 24 * 3600 * 10**15 + 1
    assert diff_fs(add_fs(t, 7, P), t, P) == 7


stamps = st.builds(
    Timestamp,
    slot=st.integers(min_value=0, max_value=4 * 10**11),
    offset_fs=st.integers(min_value=-(10**9) + 1, max_value=10**9 - 1),
)


def _valid(t):
    return t.slot * P + t.offset_fs >= 0


@settings(max_examples=300)
@given(stamps)
def test_normalize_preserves_time_and_is_idempotent(t):
    if not _valid(t):
        return
    n = normalize(t, P)
    assert n.absolute_fs(P) == t.absolute_fs(P)
    assert abs(n.offset_fs) < P
    assert normalize(n, P) == n


@settings(max_examples=300)
@given(stamps, stamps, stamps)
def test_diff_antisymmetric_and_additive(a, b, c):
    assert diff_fs(a, b, P) == -diff_fs(b, a, P)
    assert diff_fs(a, c, P) == diff_fs(a, b, P) + diff_fs(b, c, P)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 10**9), st.integers(-(10**8), 10**8)), min_size=1, max_size=50))
def test_array_helpers_match_scalar(pairs):
    pairs = [(s, o) for s, o in pairs if s * P + o >= 0]
    if not pairs:
        return
    slot = np.array([p[0] for p in pairs], dtype=np.int64)
    off = np.array([p[1] for p in pairs], dtype=np.int64)
    ns, no = normalize_arrays(slot, off, P)
    for (s, o), s2, o2 in zip(pairs, ns, no):
        assert normalize(Timestamp(s, o), P) == Timestamp(int(s2), int(o2))
    order = argsort_arrays(slot, off, P)
    absolute = slot * P + off
    assert np.array_equal(absolute[order], np.sort(absolute))
    assert is_sorted_arrays(slot[order], off[order], P)
    fs, fo = floor_key(slot, off, P)
    assert np.all((fo >= 0) & (fo < P))
    assert np.array_equal(fs * P + fo, absolute)
    rel = relative_fs(slot, off, 17, P)
    back_s, back_o = from_relative_fs(rel, 17, P)
    assert np.array_equal(back_s.astype(np.int64) * P + back_o, absolute)
    d = diff_fs_arrays(slot, off, slot[::-1], off[::-1], P)
    assert np.array_equal(d, absolute - absolute[::-1])


def test_array_overflow_guard():
    with pytest.raises(TimeOverflowError):
        diff_fs_arrays([DIFF_LIMIT_FS // P + 1], [0], [0], [0], P)
