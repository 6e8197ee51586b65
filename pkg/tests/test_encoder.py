import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from butterfly_fields.core import BBox, to_corners
from butterfly_fields.encoder import EncodeMode, FieldEncoder, assign_cells, encode, grid_shape
from butterfly_fields.synthetic import SceneSpec, generate_scene

MODES = [EncodeMode.center1(), EncodeMode.window(4), EncodeMode.full_box()]


def test_center1_cell():
    assert assign_cells(BBox(10.5, 6.0, 4, 4), 4, EncodeMode.center1()) == [(1, 2)]


@pytest.mark.parametrize("mode", [EncodeMode.full_box(), EncodeMode.window(4)])
def test_block_cells(mode):
    cells = assign_cells(BBox(8, 8, 16, 16), 4, mode)
    assert sorted(cells) == [(i, j) for i in range(4) for j in range(4)]


def test_window_ties_go_top_left():
    # center exactly on a cell center: a 4x4 block cannot be symmetric
    cells = assign_cells(BBox(10, 10, 16, 16), 4, EncodeMode.window(4))
    assert min(cells) == (0, 0) and max(cells) == (3, 3)


@pytest.mark.parametrize("cx,cy", [(37.3, 22.9), (40.1, 41.9), (18.0, 26.0), (33.0, 50.5)])
def test_window_block_is_nearest_cells(cx, cy):
    cells = assign_cells(BBox(cx, cy, 20, 20), 4, EncodeMode.window(4))

    def nearest(center):
        # stable sort on (distance, index) breaks ties toward the top-left
        return sorted(sorted(range(30), key=lambda n: (abs((n + 0.5) * 4 - center), n))[:4])

    assert sorted(cells) == [(i, j) for i in nearest(cy) for j in nearest(cx)]


def test_window_clipped_at_grid_edge():
    cells = assign_cells(BBox(1, 1, 8, 8), 4, EncodeMode.window(4), grid_h=10, grid_w=10)
    assert sorted(cells) == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_box_outside_grid_is_empty():
    assert assign_cells(BBox(500, 500, 8, 8), 4, EncodeMode.window(4), grid_h=10, grid_w=10) == []


def test_encode_skips_outside_box_with_warning(caplog):
    g = encode([BBox(500, 500, 8, 8)], 40, 40, 4)
    assert not g.p.any()
    assert "outside" in caplog.text


def test_encode_single_box_center1():
    g = encode([BBox(10, 6, 8, 8)], 32, 32, 4, EncodeMode.center1())
    assert g.p[0, 1, 2] == 1.0 and g.p.sum() == 1.0
    assert g.vx[0, 1, 2] == 0.0 and g.vy[0, 1, 2] == 0.0
    assert g.w_log[0, 1, 2] == pytest.approx(math.log(2)) and g.h_log[0, 1, 2] == pytest.approx(math.log(2))


def test_encode_empty():
    g = encode([], 32, 20, 4)
    assert g.p.shape == (1, 5, 8)
    assert not g.p.any() and not g.ignore.any()


def test_padding_to_stride_multiple():
    assert grid_shape(30, 17, 4) == (5, 8)
    assert encode([], 30, 17, 4).image_size == (32, 20)


def _brute_force_nearest(boxes, gh, gw, S):
    """Independent oracle: per cell, the nearest center among boxes whose corners contain the cell center."""
    vx = np.zeros((gh, gw))
    vy = np.zeros((gh, gw))
    p = np.zeros((gh, gw))
    for i in range(gh):
        for j in range(gw):
            x, y = (j + 0.5) * S, (i + 0.5) * S
            owners = []
            for n, b in enumerate(boxes):
                x0, y0, x1, y1 = to_corners(b)
                if x0 <= x < x1 and y0 <= y < y1:
                    owners.append((math.hypot(b.cx - x, b.cy - y), n, b))
            if owners:
                _, _, b = min(owners, key=lambda t: (t[0], t[1]))
                p[i, j] = 1
                vx[i, j] = b.cx - x
                vy[i, j] = b.cy - y
    return p, vx, vy


@pytest.mark.parametrize("boxes", [
    [BBox(20, 20, 24, 24), BBox(32, 20, 24, 24)],            # centers 3 cells apart
    [BBox(21.3, 18.7, 30, 22), BBox(33.1, 20.2, 26, 28)],
    [BBox(20, 20, 24, 24), BBox(20, 32, 24, 24), BBox(26, 26, 10, 40)],
])
def test_full_box_overlap_matches_brute_force(boxes):
    g = encode(boxes, 64, 64, 4, EncodeMode.full_box())
    p, vx, vy = _brute_force_nearest(boxes, 16, 16, 4)
    np.testing.assert_array_equal(g.p[0], p)
    np.testing.assert_allclose(g.vx[0], vx, atol=1e-12)
    np.testing.assert_allclose(g.vy[0], vy, atol=1e-12)


def test_other_class_planes_untouched():
    g = encode([BBox(20, 20, 24, 24, 0), BBox(24, 20, 24, 24, 1)], 64, 64, 4, EncodeMode.full_box())
    p0, vx0, _ = _brute_force_nearest([BBox(20, 20, 24, 24)], 16, 16, 4)
    np.testing.assert_array_equal(g.p[0], p0)
    np.testing.assert_allclose(g.vx[0], vx0, atol=1e-12)


def test_ignore_ring_geometry():
    box = BBox(32, 32, 40, 40)
    g = encode([box], 64, 64, 4, EncodeMode.window(4))
    assert g.p[0].sum() == 16
    # block spans [24, 40); ring reaches 8 px further, clipped to [12, 52)
    rows = np.flatnonzero(g.ignore[0].any(axis=1))
    assert rows.min() == 4 and rows.max() == 11
    assert not (g.ignore & (g.p > 0)).any()


def test_full_box_has_no_ignore():
    g = encode([BBox(32, 32, 40, 40)], 64, 64, 4, EncodeMode.full_box())
    assert not g.ignore.any()


def test_ignore_never_overrides_other_box_cells():
    boxes = [BBox(32, 32, 40, 40), BBox(32, 48, 12, 12)]
    g = encode(boxes, 64, 64, 4, EncodeMode.window(4))
    assert g.p[0, 11, 7] == 1.0 and not g.ignore[0, 11, 7]


scene_seeds = st.integers(0, 10_000)


def _scene(seed, n_classes=2):
    spec = SceneSpec(seed=seed, image_w=128, image_h=96, count_range=(1, 8),
                     size_bounds=(((4.0, 40.0), (4.0, 40.0)),) * n_classes, max_iou=0.3)
    return generate_scene(spec)


@settings(max_examples=40, deadline=None)
@given(scene_seeds, st.sampled_from(MODES))
def test_vectors_land_on_annotation_centers(seed, mode):
    boxes = _scene(seed)
    g = encode(boxes, 128, 96, 4, mode, num_classes=2)
    centers = {c: [(b.cx, b.cy) for b in boxes if b.class_id == c] for c in range(2)}
    for c, i, j in zip(*np.nonzero(g.p == 1)):
        tx = (j + 0.5) * 4 + g.vx[c, i, j]
        ty = (i + 0.5) * 4 + g.vy[c, i, j]
        assert min(math.hypot(tx - x, ty - y) for x, y in centers[c]) < 1e-9


@settings(max_examples=40, deadline=None)
@given(scene_seeds)
def test_full_box_positive_count_is_union_area(seed):
    boxes = _scene(seed)
    g = encode(boxes, 128, 96, 4, EncodeMode.full_box(), num_classes=2)
    for c in range(2):
        union = set()
        for b in boxes:
            if b.class_id == c:
                union.update(assign_cells(b, 4, EncodeMode.full_box(), 24, 32))
        assert np.count_nonzero(g.p[c] == 1) == len(union)


@settings(max_examples=30, deadline=None)
@given(scene_seeds, st.sampled_from(MODES))
def test_encode_deterministic(seed, mode):
    boxes = _scene(seed)
    assert encode(boxes, 128, 96, 4, mode).equals(encode(boxes, 128, 96, 4, mode))


@settings(max_examples=30, deadline=None)
@given(scene_seeds, st.sampled_from(MODES))
def test_size_channels_recover_width(seed, mode):
    boxes = _scene(seed, 1)
    g = encode(boxes, 128, 96, 4, mode)
    widths = np.array([b.w for b in boxes])
    heights = np.array([b.h for b in boxes])
    for i, j in zip(*np.nonzero(g.p[0] == 1)):
        assert np.min(np.abs(np.exp(g.w_log[0, i, j]) * 4 - widths) / widths) < 1e-12
        assert np.min(np.abs(np.exp(g.h_log[0, i, j]) * 4 - heights) / heights) < 1e-12


@pytest.mark.parametrize("text,expected", [
    ("center1", EncodeMode.center1()), ("bd16", EncodeMode.window(4)), ("window3", EncodeMode.window(3)),
    ("full", EncodeMode.full_box()),
])
def test_mode_parse(text, expected):
    assert EncodeMode.parse(text) == expected


def test_mode_parse_rejects_unknown():
    with pytest.raises(ValueError):
        EncodeMode.parse("diamond")


def test_unknown_class_rejected():
    with pytest.raises(ValueError):
        encode([BBox(5, 5, 4, 4, 3)], 32, 32, 4, num_classes=2)


def test_field_encoder_estimator():
    X = [[BBox(10, 10, 8, 8, 1)], []]
    enc = FieldEncoder(stride=4, mode="window", image_size=(32, 32))
    with pytest.raises(NotFittedError):
        enc.transform(X)
    grids = enc.fit(X).transform(X)
    assert enc.n_classes_ == 2 and len(grids) == 2
    assert grids[0].equals(encode(X[0], 32, 32, 4, EncodeMode.window(4), 2))
    assert clone(enc).get_params() == enc.get_params()
