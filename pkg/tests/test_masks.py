import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from propseg.boxes import Box
from propseg.masks import (
    mask_iou,
    mask_tight_box,
    rle_decode,
    rle_encode,
)


def test_rle_starts_with_background():
    m = np.zeros((2, 3), dtype=bool)
    m[0, 0] = True
    rle = rle_encode(m)
    assert rle["size"] == [2, 3]
    assert rle["counts"] == [0, 1, 5]  # leading zero-length background run


def test_rle_empty_and_full():
    empty = np.zeros((3, 4), dtype=bool)
    assert rle_encode(empty)["counts"] == [12]
    full = np.ones((3, 4), dtype=bool)
    assert rle_encode(full)["counts"] == [0, 12]


def test_rle_row_major():
    m = np.array([[0, 1], [1, 0]], dtype=bool)
    assert rle_encode(m)["counts"] == [1, 2, 1]


def test_rle_decode_validates_total():
    with pytest.raises(ValueError):
        rle_decode({"size": [2, 2], "counts": [3]})


@settings(max_examples=60)
@given(hnp.arrays(np.bool_, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12)))
def test_rle_round_trip(m):
    assert np.array_equal(rle_decode(rle_encode(m)), m)


def test_mask_iou():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[:2] = True
    b[1:3] = True
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, b) == pytest.approx(4 / 12)
    assert mask_iou(a, ~a) == 0.0
    assert mask_iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 0.0
    with pytest.raises(ValueError):
        mask_iou(a, np.zeros((2, 2), bool))


def test_mask_tight_box():
    m = np.zeros((6, 8), dtype=bool)
    assert mask_tight_box(m) is None
    m[2, 3] = True
    assert mask_tight_box(m) == Box(3, 2, 4, 3)
    m[4, 6] = True
    assert mask_tight_box(m) == Box(3, 2, 7, 5)
