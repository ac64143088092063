import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddclass.decomposition import (
    extract_tiles,
    format_grid,
    parse_grid,
    plan_grid,
    reassemble,
    stack_tiles,
)
from ddclass.errors import ContractError, ShapeError


def test_parse_and_format_grid():
    assert parse_grid("2x2") == (2, 2)
    assert parse_grid("4x4x2") == (4, 4, 2)
    assert format_grid((4, 4, 2)) == "4x4x2"
    for bad in ("2", "0x2", "2x2x2x2", "axb"):
        with pytest.raises(ContractError):
            parse_grid(bad)


def test_cifar_and_ct_plans():
    plan = plan_grid((32, 32), (2, 2), channels=3)
    assert plan.n == 4 and all(t.extents == (16, 16) for t in plan.tiles)
    assert plan.tile_input_shape(0) == (3, 16, 16)
    ct = plan_grid((128, 128, 64), (4, 4, 2))
    assert ct.n == 32 and all(t.extents == (32, 32, 32) for t in ct.tiles)


def test_overlap_clipped_at_border():
    plan = plan_grid((4, 4), (2, 2), delta=1)
    assert [t.extents for t in plan.tiles] == [(3, 3)] * 4
    assert [t.origin for t in plan.tiles] == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_row_major_order_and_remainder():
    plan = plan_grid((7, 5), (2, 3))
    assert [t.position for t in plan.tiles] == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
    assert [t.extents for t in plan.tiles[:3]] == [(3, 1), (3, 1), (3, 3)]
    assert plan.tiles[3].extents == (4, 1)
    assert not plan.uniform


def test_plan_errors():
    with pytest.raises(ContractError):
        plan_grid((4, 4), (5, 1))
    with pytest.raises(ContractError):
        plan_grid((4, 4), (2, 2), delta=-1)
    with pytest.raises(ContractError):
        plan_grid((4, 4), (2, 2, 2))


def test_extract_examples():
    plan = plan_grid((6, 4), (3, 2), channels=2)
    img = np.full((2, 6, 4), 3.0, np.float32)
    tiles = extract_tiles(img, plan)
    assert all(np.all(t == 3.0) for t in tiles)
    assert sum(t.size for t in tiles) == img.size
    img = np.arange(48.0).reshape(2, 6, 4)
    tiles = extract_tiles(img, plan)
    rows = [np.concatenate(tiles[r * 2:(r + 1) * 2], axis=-1) for r in range(3)]
    np.testing.assert_array_equal(np.concatenate(rows, axis=-2), img)
    tiles[0][...] = -1
    assert img.min() == 0  # copies, not views
    with pytest.raises(ShapeError):
        extract_tiles(np.zeros((2, 6, 5)), plan)
    with pytest.raises(ShapeError):
        extract_tiles(np.zeros((3, 6, 4)), plan)


def test_stack_tiles_channel_order():
    plan = plan_grid((4, 4), (2, 2), channels=1)
    x = np.arange(32.0).reshape(2, 1, 4, 4)
    s = stack_tiles(x, plan)
    assert s.shape == (2, 4, 2, 2)
    np.testing.assert_array_equal(s[:, 1:2], extract_tiles(x, plan)[1])
    with pytest.raises(ContractError):
        stack_tiles(np.zeros((1, 1, 5, 4)), plan_grid((5, 4), (2, 2)))


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_overlap_roundtrip_and_column_sums(data):
    rank = data.draw(st.sampled_from([2, 3]))
    shape = tuple(data.draw(st.integers(2, 9)) for _ in range(rank))
    grid = tuple(data.draw(st.integers(1, s)) for s in shape)
    delta = data.draw(st.integers(0, 2))
    plan = plan_grid(shape, grid, delta)
    x = np.random.default_rng(0).standard_normal((1,) + shape).astype(np.float32)
    np.testing.assert_array_equal(reassemble(extract_tiles(x, plan), plan), x)
    if delta == 0:
        heights = [t.extents[0] for t in plan.tiles if all(p == 0 for p in t.position[1:])]
        assert sum(heights) == shape[0]
