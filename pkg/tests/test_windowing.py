import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qformer import autodiff as ad
from qformer.windowing import base_coords, centers, merge, partition, relative_offsets


@pytest.mark.parametrize("h,w,win,n_windows,pad", [
    (4, 4, 2, 4, (0, 0)),
    (5, 5, 2, 9, (1, 1)),
    (2, 2, 2, 1, (0, 0)),
    (7, 3, 7, 1, (0, 4)),
])
def test_partition_counts(h, w, win, n_windows, pad):
    g = partition(ad.const(np.zeros((1, h, w, 3))), win)
    assert g.windows.shape == (1, n_windows, win * win, 3)
    assert (g.pad_h, g.pad_w) == pad


def test_single_window_is_flattened_map(rng):
    x = rng.normal(size=(1, 2, 2, 3))
    g = partition(ad.const(x), 2)
    np.testing.assert_array_equal(g.windows.value[0, 0], x[0].reshape(4, 3))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 4), st.integers(1, 3))
def test_round_trip(h, w, win, c):
    x = np.random.default_rng(h * 100 + w * 10 + win).normal(size=(2, h, w, c))
    back = merge(partition(ad.const(x), win), h, w)
    assert np.array_equal(back.value, x)


def test_merge_all_ones():
    g = partition(ad.const(np.ones((1, 6, 8, 2))), 2)
    assert (merge(g, 6, 8).value == 1).all()


def test_merge_rejects_wrong_extent():
    g = partition(ad.const(np.ones((1, 4, 4, 1))), 2)
    with pytest.raises(ValueError):
        merge(g, 7, 4)


def test_centers_4x4():
    xy = centers(4, 4, 2).xy
    assert sorted(map(tuple, xy)) == sorted([(0.5, 0.5), (2.5, 0.5), (0.5, 2.5), (2.5, 2.5)])


def test_centers_unit_window_every_pixel():
    xy = centers(3, 2, 1).xy
    assert sorted(map(tuple, xy)) == [(x, y) for x in (0.0, 1.0) for y in (0.0, 1.0, 2.0)]


def test_single_7x7_center():
    assert centers(7, 7, 7).xy.tolist() == [[3.0, 3.0]]


def test_base_coords_match_partition_order():
    h, w, win = 4, 6, 2
    xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    grid = np.stack([xs, ys], axis=-1)[None]
    g = partition(ad.const(grid), win)
    np.testing.assert_array_equal(g.windows.value[0], base_coords(h, w, win))


def test_relative_offsets_symmetric():
    off = relative_offsets(3)
    np.testing.assert_array_equal(off.sum(axis=0), [0, 0])
    assert off[0].tolist() == [-1.0, -1.0] and off[1].tolist() == [0.0, -1.0]
