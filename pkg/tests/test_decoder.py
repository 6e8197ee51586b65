import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from butterfly_fields.core import BBox, DecoderConfig, Detection, FieldGrid, iou
from butterfly_fields.decoder import (ButterflyDecoder, Peak, Vote, Votes, accumulate, aggregate_size, chi,
                                      collect_votes, decode, decode_no_voting, extract_peaks, sigma, soft_nms,
                                      subpixel_refine)
from butterfly_fields.encoder import EncodeMode, assign_cells, encode
from butterfly_fields.synthetic import SceneSpec, generate_scene

CFG16 = DecoderConfig(chi=16.0)


def vote(tx, ty, p=1.0, w=20.0, h=20.0, sx=2.0, sy=2.0, chi_=16.0, c=0):
    return Vote(c, (0, 0), tx, ty, p, w, h, sx, sy, chi_)


def naive_map(votes, C, H, W):
    """Untruncated per-pixel double loop."""
    out = np.zeros((C, H, W))
    for v in votes:
        for y in range(H):
            for x in range(W):
                out[v.class_id, y, x] += v.p / v.chi * math.exp(
                    -0.5 * ((x + 0.5 - v.tx) / v.sx) ** 2 - 0.5 * ((y + 0.5 - v.ty) / v.sy) ** 2)
    return out


@pytest.mark.parametrize("args,expected", [
    ((40, 20, 10, 2), (4, 2)), ((5, 5, 10, 2), (2, 2)), ((100, 50, 5, 2), (20, 10)),
])
def test_sigma(args, expected):
    assert tuple(map(float, sigma(*args))) == expected


def test_chi_modes():
    assert chi(16.0, 30, 30, 4) == 16.0
    assert chi("box_area", 16, 8, 4) == 8.0
    assert chi("box_area", 2, 2, 4) == 1.0
    with pytest.raises(ValueError):
        chi("area", 1, 1, 4)


def _grid(p, vx=None, vy=None, w_log=None, h_log=None, stride=4):
    z = np.zeros_like(p)
    return FieldGrid(p, z if vx is None else vx, z if vy is None else vy,
                     z if w_log is None else w_log, z if h_log is None else h_log, stride=stride)


def test_collect_votes_empty_grid():
    assert len(collect_votes(_grid(np.zeros((1, 4, 4))))) == 0


def test_collect_votes_single_cell():
    p = np.zeros((1, 4, 4))
    p[0, 1, 2] = 0.9
    logs = np.full((1, 4, 4), math.log(4))
    votes = collect_votes(_grid(p, w_log=logs, h_log=logs))
    assert len(votes) == 1
    v = votes[0]
    assert (v.tx, v.ty, v.p) == (10.0, 6.0, 0.9)
    assert v.w_px == pytest.approx(16.0) and v.h_px == pytest.approx(16.0)


def test_collect_votes_encoder_consistency():
    box = BBox(33.3, 27.1, 24, 18)
    votes = collect_votes(encode([box], 64, 64, 4, EncodeMode.window(4)))
    assert len(votes) == len(assign_cells(box, 4, EncodeMode.window(4)))
    np.testing.assert_allclose(votes.tx, box.cx, atol=1e-12)
    np.testing.assert_allclose(votes.ty, box.cy, atol=1e-12)


def test_collect_votes_counts_nonfinite():
    p = np.zeros((1, 3, 3))
    p[0, 0, 0] = p[0, 1, 1] = 0.8
    vx = np.zeros((1, 3, 3))
    vx[0, 1, 1] = np.nan
    votes = collect_votes(_grid(p, vx=vx))
    assert len(votes) == 1 and votes.n_nonfinite == 1


def test_collect_votes_clamps_targets():
    p = np.zeros((1, 3, 3))
    p[0, 0, 0] = 1.0
    vx = np.full((1, 3, 3), -50.0)
    v = collect_votes(_grid(p, vx=vx))[0]
    assert v.tx == 0.0


# the map is sampled at pixel centers, so a target at (50.5, 50.5) is the mode of pixel (50, 50)
def test_accumulate_mode_value():
    m = accumulate(Votes.from_list([vote(50.5, 50.5)]), CFG16, 100, 100)
    assert m[0, 50, 50] == pytest.approx(1 / 16, abs=1e-15)
    assert m[0, 50, 52] == pytest.approx(math.exp(-0.5) / 16, abs=1e-15)


def test_accumulate_chi_exactness():
    box = BBox(50.5, 50.5, 24, 24)
    votes = collect_votes(encode([box], 100, 100, 4, EncodeMode.window(4)), CFG16)
    assert len(votes) == 16
    m = accumulate(votes, CFG16, 100, 100)
    assert abs(m[0, 50, 50] - 1.0) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_accumulate_matches_untruncated_loop(seed):
    rng = np.random.default_rng(seed)
    H, W, C = int(rng.integers(4, 24)), int(rng.integers(4, 24)), 2
    n = int(rng.integers(1, 12))
    votes = [vote(rng.uniform(0, W), rng.uniform(0, H), rng.uniform(0.1, 1), sx=rng.uniform(0.5, 5),
                  sy=rng.uniform(0.5, 5), chi_=rng.uniform(1, 20), c=int(rng.integers(0, C))) for _ in range(n)]
    m = accumulate(Votes.from_list(votes), CFG16, W, H, C)
    np.testing.assert_allclose(m, naive_map(votes, C, H, W), rtol=0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_removing_a_vote_never_increases_map(seed):
    rng = np.random.default_rng(seed)
    votes = [vote(rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(0.1, 1), sx=rng.uniform(1, 4),
                  sy=rng.uniform(1, 4)) for _ in range(8)]
    full = accumulate(Votes.from_list(votes), CFG16, 40, 40)
    drop = int(rng.integers(0, 8))
    less = accumulate(Votes.from_list(votes[:drop] + votes[drop + 1:]), CFG16, 40, 40)
    assert (less <= full + 1e-15).all()


def test_extract_peaks_single_and_empty():
    m = accumulate(Votes.from_list([vote(30.5, 20.5, chi_=1.0)]), CFG16, 64, 64)
    assert extract_peaks(m, CFG16) == [Peak(0, 30, 20, 1.0)]
    assert extract_peaks(np.zeros((2, 10, 10)), CFG16) == []


def test_extract_peaks_two_gaussians_brute_force():
    m = accumulate(Votes.from_list([vote(20.3, 30.5, chi_=1.0), vote(40.3, 30.5, chi_=1.0)]), CFG16, 64, 64)
    peaks = extract_peaks(m, CFG16)
    # oracle: exhaustive comparison against all 8 neighbours
    plane = np.pad(m[0], 1, constant_values=-np.inf)
    expected = []
    for y in range(64):
        for x in range(64):
            v = plane[y + 1, x + 1]
            nb = plane[y:y + 3, x:x + 3].copy()
            nb[1, 1] = -np.inf
            if v >= CFG16.select_threshold and v > nb.max():
                expected.append((x, y))
    assert sorted((p.px, p.py) for p in peaks) == sorted(expected)
    assert len(peaks) == 2


def test_extract_peaks_plateau_smallest_yx():
    m = np.zeros((1, 5, 5))
    m[0, 2, 2] = m[0, 2, 3] = m[0, 3, 2] = 0.5
    assert extract_peaks(m, CFG16) == [Peak(0, 2, 2, 0.5)]


def test_subpixel_examples():
    one = Votes.from_list([vote(50.37, 50.81)])
    assert subpixel_refine((50, 50), one, CFG16) == pytest.approx((50.37, 50.81))
    two = Votes.from_list([vote(50.2, 50.2, p=0.5), vote(50.6, 50.6, p=0.5)])
    assert subpixel_refine((50, 50), two, CFG16) == pytest.approx((50.4, 50.4))
    off = DecoderConfig(subpixel=False)
    assert subpixel_refine((50, 50), two, off) == (50.5, 50.5)


def test_subpixel_best_mode_and_fallback():
    votes = Votes.from_list([vote(50.2, 50.2, p=0.4), vote(50.6, 50.7, p=0.6), vote(58, 58, p=1.0)])
    assert subpixel_refine((50, 50), votes, DecoderConfig(subpixel_mode="best")) == (50.6, 50.7)
    assert subpixel_refine((10, 10), votes, CFG16) == (10.5, 10.5)


def test_aggregate_size_examples():
    assert aggregate_size((50, 50), Votes.from_list([vote(50, 50, w=10), vote(50, 50, w=14)]))[0] == 12
    assert aggregate_size((50, 50), Votes.from_list([vote(50, 50, p=0.9, w=10), vote(50, 50, p=0.1, w=20)]))[0] \
        == pytest.approx(11)
    assert aggregate_size((0, 0), Votes.from_list([vote(50, 50)])) is None


def test_aggregate_size_round_trip_exact():
    box = BBox(40.25, 30.75, 22.0, 13.0)
    votes = collect_votes(encode([box], 80, 80, 4), CFG16)
    w, h = aggregate_size((box.cx, box.cy), votes)
    assert w == pytest.approx(22.0, rel=1e-12) and h == pytest.approx(13.0, rel=1e-12)


def test_soft_nms_examples():
    b = BBox(10, 10, 8, 8)
    out = soft_nms([Detection(b, 0.9), Detection(b, 0.8)], 0.5)
    assert out[0].score == 0.9
    assert out[1].score == pytest.approx(0.8 * math.exp(-2))
    far = [Detection(b, 0.9), Detection(BBox(50, 50, 8, 8), 0.8)]
    assert [d.score for d in soft_nms(far, 0.5)] == [0.9, 0.8]
    assert soft_nms([Detection(b, 0.3)], 0.5) == [Detection(b, 0.3)]


@pytest.mark.parametrize("s", [1e-2, 1e-3, 1e-6])
def test_soft_nms_small_sigma_is_hard_suppression(s):
    b = BBox(10, 10, 8, 8)
    dets = [Detection(b, 0.9), Detection(BBox(10.5, 10, 8, 8), 0.8), Detection(b, 0.7)]
    kept = [d for d in soft_nms(dets, s, 0.0) if d.score > 1e-3]
    assert kept == [dets[0]]


def test_decode_single_box_round_trip():
    box = BBox(41.3, 27.8, 30.0, 17.0)
    dets = decode(encode([box], 96, 64, 4, EncodeMode.window(4)), CFG16)
    assert len(dets) == 1 and iou(dets[0].box, box) >= 0.99


def test_decode_fifty_boxes():
    spec = SceneSpec(seed=7, image_w=512, image_h=512, count_range=(50, 50))
    boxes = generate_scene(spec)
    dets = decode(encode(boxes, 512, 512, 4), CFG16)
    assert len(dets) == 50
    for b in boxes:
        assert max(iou(d.box, b) for d in dets) >= 0.95


def test_decode_low_confidence_is_empty():
    g = encode([BBox(20, 20, 16, 16)], 40, 40, 4)
    assert decode(g.replace(p=g.p * 0.09), CFG16) == []
    assert decode(encode([], 40, 40, 4), CFG16) == []


def test_decode_clamps_boxes_to_image():
    box = BBox(4.0, 30.0, 20.0, 20.0)
    det = decode(encode([box], 64, 64, 4), CFG16)[0]
    assert det.box.cx - det.box.w / 2 == pytest.approx(0.0, abs=1e-9)
    assert det.box.w == pytest.approx(14.0, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_round_trip_property(seed):
    spec = SceneSpec(seed=seed, image_w=160, image_h=128, count_range=(1, 12),
                     size_bounds=(((8.0, 48.0), (8.0, 48.0)),) * 2)
    boxes = generate_scene(spec)
    dets = decode(encode(boxes, 160, 128, 4, EncodeMode.window(4), 2), CFG16)
    assert len(dets) == len(boxes)
    for b in boxes:
        d = max((d for d in dets if d.class_id == b.class_id), key=lambda d: iou(d.box, b))
        assert iou(d.box, b) >= 0.95
        assert math.hypot(d.box.cx - b.cx, d.box.cy - b.cy) <= 0.1


def test_decode_is_deterministic(small_scenes):
    for s in small_scenes:
        g = encode(s.boxes, s.width, s.height, 4, num_classes=2)
        assert decode(g, CFG16) == decode(g, CFG16)


def test_no_voting_raw_and_suppressed():
    g = encode([BBox(30.2, 30.9, 24, 24)], 64, 64, 4, EncodeMode.window(4))
    assert len(collect_votes(g, CFG16, threshold=CFG16.select_threshold)) == 16
    cfg = DecoderConfig(chi=16.0, softnms_sigma=0.3)
    dets = decode_no_voting(g, cfg)
    assert len([d for d in dets if d.score > cfg.select_threshold]) == 1
    assert decode_no_voting(encode([], 64, 64, 4), cfg) == []


def test_decoder_estimator():
    box = BBox(30, 30, 20, 20)
    X = [encode([box], 64, 64, 4)]
    est = ButterflyDecoder(chi=16.0)
    with pytest.raises(NotFittedError):
        est.predict(X)
    est.fit()
    assert est.config_ == CFG16
    assert iou(est.predict(X)[0][0].box, box) > 0.99
    assert est.score(X, [[box]]) == 1.0
    assert clone(est).get_params() == est.get_params()
    assert ButterflyDecoder(voting=False, chi=16.0).fit().predict(X)[0]
