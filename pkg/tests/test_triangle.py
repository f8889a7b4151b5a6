import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reservelab import (
    CellIndexSets,
    KindMismatchError,
    Triangle,
    TriangleFormatError,
    index_sets,
    load_triangle,
    to_cumulative,
    to_incremental,
)

TABLE_ROW_1 = [3511.0, 3215.0, 2266.0, 1712.0, 1059.0, 587.0, 340.0]


def ragged_rows(values_by_row):
    return Triangle.from_rows(values_by_row)


def test_single_cell_identity():
    tri = Triangle.from_rows([[3511.0]])
    cum = to_cumulative(tri)
    assert cum.kind == "cumulative"
    assert cum.cell(1, 1) == 3511.0


def test_to_cumulative_first_row_prefix_sums(uk_motor_thousands):
    cum = to_cumulative(uk_motor_thousands)
    expected = list(itertools.accumulate(TABLE_ROW_1))
    assert expected == [3511, 6726, 8992, 10704, 11763, 12350, 12690]
    np.testing.assert_allclose(cum.observed_row(1), expected, rtol=0, atol=0)


def test_to_cumulative_zero_row():
    rows = [[0.0] * 7] + [[0.0] * (7 - i) for i in range(1, 7)]
    cum = to_cumulative(ragged_rows(rows))
    np.testing.assert_array_equal(cum.observed_row(1), np.zeros(7))


def test_to_incremental_inverts_prefix_sums(uk_motor_thousands):
    cum = to_cumulative(uk_motor_thousands)
    inc = to_incremental(cum)
    np.testing.assert_allclose(inc.observed_row(1), TABLE_ROW_1, rtol=0, atol=0)


def test_to_incremental_constant_row():
    tri = Triangle.from_rows([[5.0, 5.0, 5.0], [4.0, 4.0], [3.0]], kind="cumulative")
    inc = to_incremental(tri)
    np.testing.assert_array_equal(inc.observed_row(1), [5.0, 0.0, 0.0])


def test_to_incremental_single_cell_identity():
    tri = Triangle.from_rows([[7.0]], kind="cumulative")
    assert to_incremental(tri).cell(1, 1) == 7.0


def test_kind_mismatch_errors():
    inc = Triangle.from_rows([[1.0]])
    cum = Triangle.from_rows([[1.0]], kind="cumulative")
    with pytest.raises(KindMismatchError):
        to_cumulative(cum)
    with pytest.raises(KindMismatchError):
        to_incremental(inc)


@given(
    st.integers(min_value=1, max_value=8).flatmap(
        lambda n: st.lists(
            st.lists(st.integers(min_value=0, max_value=10**12), min_size=n, max_size=n),
            min_size=n,
            max_size=n,
        ).map(lambda rows: [row[: n - i] for i, row in enumerate(rows)])
    )
)
@settings(max_examples=100, deadline=None)
def test_roundtrip_exact_on_integer_amounts(rows):
    tri = Triangle.from_rows([[float(v) for v in row] for row in rows])
    back = to_incremental(to_cumulative(tri))
    # integer-valued payments round-trip with tolerance zero
    np.testing.assert_array_equal(
        np.nan_to_num(back.values), np.nan_to_num(tri.values)
    )


@given(
    st.integers(min_value=1, max_value=7).flatmap(
        lambda n: st.lists(
            st.lists(
                st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
                min_size=n, max_size=n,
            ),
            min_size=n, max_size=n,
        ).map(lambda rows: [row[: n - i] for i, row in enumerate(rows)])
    )
)
@settings(max_examples=100, deadline=None)
def test_roundtrip_close_on_real_amounts(rows):
    tri = Triangle.from_rows(rows)
    back = to_incremental(to_cumulative(tri))
    np.testing.assert_allclose(
        np.nan_to_num(back.values), np.nan_to_num(tri.values), rtol=1e-9, atol=1e-6
    )


def test_observed_sum_equals_latest_diagonal_of_cumulative(uk_motor):
    cum = to_cumulative(uk_motor)
    assert uk_motor.observed_sum() == pytest.approx(
        cum.latest_diagonal().sum(), rel=1e-12
    )


@pytest.mark.parametrize("n", range(1, 11))
def test_index_set_sizes(n):
    sets = CellIndexSets.for_periods(n)
    assert len(sets.observed) == n * (n + 1) // 2
    assert len(sets.unobserved) == n * (n - 1) // 2
    assert not set(sets.observed) & set(sets.unobserved)
    assert set(sets.observed) | set(sets.unobserved) == {
        (i, j) for i in range(1, n + 1) for j in range(1, n + 1)
    }


def test_index_sets_small_cases(uk_motor):
    assert len(index_sets(uk_motor).unobserved) == 21
    assert CellIndexSets.for_periods(1).unobserved == ()
    assert CellIndexSets.for_periods(2).unobserved == ((2, 2),)


def test_load_bundled_triangle_scales(uk_motor, uk_motor_thousands):
    assert uk_motor.cell(1, 1) == 3_511_000.0
    assert uk_motor_thousands.cell(1, 1) == 3511.0
    assert uk_motor.n_periods == 7
    assert uk_motor.kind == "incremental"


def test_load_empty_file_is_an_error():
    with pytest.raises(TriangleFormatError):
        load_triangle(io.StringIO(""))


def test_load_bad_header():
    with pytest.raises(TriangleFormatError, match="header"):
        load_triangle(io.StringIO("n=3\n1,2,3\n"))


def test_load_ragged_row_reports_location():
    text = "I=3\n1,2,3\n4,5\n6,,\n"
    with pytest.raises(TriangleFormatError, match="row 2"):
        load_triangle(io.StringIO(text))


def test_load_blank_in_observed_region():
    text = "I=3\n1,,3\n4,5,\n6,,\n"
    with pytest.raises(TriangleFormatError, match="row 1, column 2"):
        load_triangle(io.StringIO(text))


def test_load_non_numeric_entry():
    text = "I=3\n1,2,3\n4,x,\n6,,\n"
    with pytest.raises(TriangleFormatError, match="row 2, column 2"):
        load_triangle(io.StringIO(text))


def test_load_value_below_antidiagonal():
    text = "I=3\n1,2,3\n4,5,9\n6,,\n"
    with pytest.raises(TriangleFormatError, match="antidiagonal"):
        load_triangle(io.StringIO(text))


def test_load_wrong_row_count():
    with pytest.raises(TriangleFormatError, match="data rows"):
        load_triangle(io.StringIO("I=3\n1,2,3\n4,5,\n"))


def test_values_are_immutable(uk_motor):
    with pytest.raises(ValueError):
        uk_motor.values[0, 0] = 1.0


def test_cell_outside_observed_region(uk_motor):
    with pytest.raises(KeyError):
        uk_motor.cell(7, 2)
    with pytest.raises(KeyError):
        uk_motor.cell(0, 1)


def test_scaled_multiplies_amounts(uk_motor_thousands, uk_motor):
    scaled = uk_motor_thousands.scaled(1000.0)
    np.testing.assert_allclose(
        np.nan_to_num(scaled.values), np.nan_to_num(uk_motor.values), rtol=0
    )
    assert scaled.kind == uk_motor_thousands.kind


def test_from_rows_validates_lengths():
    with pytest.raises(ValueError):
        Triangle.from_rows([[1.0, 2.0], [3.0, 4.0]])


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        Triangle.from_rows([[1.0]], kind="paid")
