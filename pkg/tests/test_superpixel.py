import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from openess.events import EventStream, EventWindow
from openess.superpixel import (UNASSIGNED, MaskFormatError, SuperpixelMap, dump_mask,
                                group_superevents, load_mask_file, parse_mask,
                                segment_boundaries, select_largest, slic, write_mask_file)

from oracles import random_stream


def two_region(rng, size=32):
    """Noisy two-intensity image split by a random line or disk; returns (image, region ids)."""
    yy, xx = np.mgrid[0:size, 0:size]
    if rng.random() < 0.5:
        a = rng.uniform(0, np.pi)
        c = rng.uniform(size * 0.3, size * 0.7, 2)
        mask = (np.cos(a) * (xx - c[0]) + np.sin(a) * (yy - c[1])) > 0
    else:
        c = rng.uniform(size * 0.35, size * 0.65, 2)
        r = rng.uniform(size * 0.15, size * 0.35)
        mask = (xx - c[0]) ** 2 + (yy - c[1]) ** 2 < r * r
    lo = rng.uniform(20, 170)
    hi = lo + rng.uniform(60, 85)
    img = np.where(mask, hi, lo) + rng.normal(0, 5, mask.shape)
    return img, mask.astype(int)


def kmeans_spatial(h, w, rows, cols, iters=10):
    """Lloyd iterations on pixel coordinates with an exhaustive nearest-centre search."""
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.stack([yy.ravel(), xx.ravel()], 1).astype(float)
    cy = (np.arange(rows) + 0.5) * h / rows - 0.5
    cx = (np.arange(cols) + 0.5) * w / cols - 0.5
    centers = np.array([(a, b) for a in cy for b in cx])
    for _ in range(iters):
        d = ((pts[:, None, :] - centers[None]) ** 2).sum(-1)
        lab = d.argmin(1)
        centers = np.array([pts[lab == k].mean(0) for k in range(len(centers))])
    return lab.reshape(h, w)


def test_constant_image_gives_2x2_grid():
    sp = slic(np.full((8, 8), 100.0), 4)
    assert sp.num_segments == 4
    assert sorted(sp.sizes().tolist()) == [16] * 4
    q = sp.labels
    for block in (q[:4, :4], q[:4, 4:], q[4:, :4], q[4:, 4:]):
        assert len(np.unique(block)) == 1
    assert np.array_equal(q, kmeans_spatial(8, 8, 2, 2))


@pytest.mark.parametrize("shape,m", [((8, 8), 16), ((12, 9), 6), ((10, 10), 25)])
def test_constant_image_matches_kmeans_oracle(shape, m):
    from openess.superpixel import _grid_shape

    rows, cols = _grid_shape(*shape, m)
    sp = slic(np.zeros(shape), m)
    oracle = kmeans_spatial(*shape, rows, cols)
    # same partition up to label names
    pairs = set(zip(sp.labels.ravel().tolist(), oracle.ravel().tolist()))
    assert len(pairs) == len(np.unique(oracle)) == sp.num_segments


def test_single_segment():
    img = np.random.default_rng(0).uniform(0, 255, (7, 5))
    sp = slic(img, 1)
    assert sp.num_segments == 1 and np.all(sp.labels == 0)


def test_half_black_half_white_split_on_edge():
    img = np.zeros((8, 8))
    img[:, 4:] = 255
    sp = slic(img, 2)
    assert sp.num_segments == 2
    assert len(np.unique(sp.labels[:, :4])) == 1
    assert len(np.unique(sp.labels[:, 4:])) == 1
    assert sp.labels[0, 0] != sp.labels[0, 7]


def test_rgb_frames_accepted():
    img = np.zeros((8, 8, 3))
    img[:, 4:, 0] = 255
    sp = slic(img, 2)
    assert sp.labels[0, 0] != sp.labels[0, 7]


@pytest.mark.parametrize("m", [0, 65])
def test_segment_count_bounds(m):
    with pytest.raises(ValueError):
        slic(np.zeros((8, 8)), m)


def test_empty_image_rejected():
    with pytest.raises(ValueError):
        slic(np.zeros((0, 4)), 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 20), st.integers(3, 20), st.integers(1, 30),
       st.floats(0.5, 40))
def test_slic_full_partition(seed, h, w, m, compactness):
    m = min(m, h * w)
    img = np.random.default_rng(seed).uniform(0, 255, (h, w))
    sp = slic(img, m, compactness, seed=seed, jitter=0.3)
    assert not np.any(sp.labels == UNASSIGNED)
    assert sp.sizes().sum() == h * w
    assert np.all(sp.sizes() > 0)  # dense ids
    # every segment is 4-connected
    for k in range(sp.num_segments):
        _, n = ndimage.label(sp.labels == k)
        assert n == 1


def test_slic_deterministic():
    img = np.random.default_rng(1).uniform(0, 255, (24, 24))
    a = slic(img, 12, seed=5, jitter=0.4)
    b = slic(img, 12, seed=5, jitter=0.4)
    assert np.array_equal(a.labels, b.labels)


def test_boundary_adherence_on_two_region_images():
    rng = np.random.default_rng(2024)
    hit = total = 0
    for i in range(50):
        img, gt = two_region(rng)
        sp = slic(img, int(rng.integers(8, 40)), seed=i)
        truth = segment_boundaries(gt)
        near = ndimage.binary_dilation(segment_boundaries(sp.labels), np.ones((3, 3), bool))
        hit += int((truth & near).sum())
        total += int(truth.sum())
    assert hit / total >= 0.95


def test_segment_boundaries_simple():
    lab = np.array([[0, 0, 1], [0, 0, 1]])
    b = segment_boundaries(lab)
    assert b.tolist() == [[False, True, True], [False, True, True]]


# -------------------------------------------------------------------------------- masks


def mask_bytes(h, w, labels):
    return struct.pack("<5sII", b"MASK1", h, w) + np.asarray(labels, "<u4").tobytes()


def test_mask_two_segments():
    sp = parse_mask(mask_bytes(2, 2, [0, 0, 1, 1]))
    assert sp.num_segments == 2 and sp.sizes().tolist() == [2, 2]


def test_mask_partial_coverage():
    sp = parse_mask(mask_bytes(2, 2, [0, UNASSIGNED, UNASSIGNED, 0]))
    assert sp.num_segments == 1
    assert sp.sizes().tolist() == [2]


def test_mask_truncated():
    with pytest.raises(MaskFormatError, match="truncated mask"):
        parse_mask(mask_bytes(2, 2, [0, 0, 1, 1])[:-2])


def test_mask_strict_label_check():
    with pytest.raises(MaskFormatError):
        parse_mask(mask_bytes(1, 2, [0, 3]), expected_segments=2)
    assert parse_mask(mask_bytes(1, 2, [0, 1]), expected_segments=2).num_segments == 2


def test_mask_file_round_trip(tmp_path):
    sp = slic(np.random.default_rng(0).uniform(0, 255, (9, 11)), 6)
    write_mask_file(tmp_path / "m.mask", sp)
    back = load_mask_file(tmp_path / "m.mask")
    assert np.array_equal(back.labels, sp.labels)
    assert dump_mask(back) == dump_mask(sp)


def test_select_largest():
    lab = np.array([[0, 0, 0, 1], [2, 2, 1, 1], [3, UNASSIGNED, 1, 2]], dtype=np.uint32)
    out = select_largest(SuperpixelMap(lab), 2)
    # sizes: 0->3, 1->4, 2->3, 3->1; keep 1 (rank 0) then 0 (rank 0 tie-break by id)
    assert out.labels[0, 3] == 0 and out.labels[0, 0] == 1
    assert out.labels[1, 0] == UNASSIGNED and out.labels[2, 0] == UNASSIGNED
    assert out.num_segments == 2


# ---------------------------------------------------------------------------- grouping


def window_of(records, w=4, h=4):
    t, x, y, p = (np.array(c) for c in zip(*records))
    s = EventStream.from_arrays(w, h, t, x, y, p)
    return EventWindow(s, 0, len(s))


def quadrants(h=8, w=8):
    lab = np.zeros((h, w), dtype=np.uint32)
    lab[:, w // 2:] = 1
    lab[h // 2:, :] += 2
    return SuperpixelMap(lab)


def test_all_events_in_segment_zero():
    sp = SuperpixelMap(np.array([[0, 0, 1, 1]] * 4, dtype=np.uint32))
    win = window_of([(0, 0, 0, 1), (1, 1, 3, -1), (2, 0, 2, 1)])
    sev = group_superevents(sp, win)
    assert sev.members[0].tolist() == [0, 1, 2]
    assert len(sev.members[1]) == 0
    assert sev.active.tolist() == [True, False]


def test_events_on_sentinel_pixels_are_unassigned():
    lab = np.full((4, 4), UNASSIGNED, dtype=np.uint32)
    lab[3, 3] = 0
    sev = group_superevents(SuperpixelMap(lab), window_of([(0, 0, 0, 1), (1, 1, 1, 1)]))
    assert sev.unassigned == 2
    assert not sev.active.any()


def test_grouping_matches_pixel_lookup():
    rng = np.random.default_rng(7)
    s = random_stream(rng, 100)
    sp = quadrants()
    sev = group_superevents(sp, EventWindow(s, 0, 100))
    expected = np.zeros(4, int)
    for e in s.events:
        expected[sp.labels[e["y"], e["x"]]] += 1
    assert sev.counts.tolist() == expected.tolist()
    for k, mem in enumerate(sev.members):
        for j in mem:
            assert sp.labels[s.y[j], s.x[j]] == k
        px = np.unique(s.y[mem].astype(int) * 8 + s.x[mem])
        assert np.array_equal(sev.pixels[k], px)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        group_superevents(quadrants(8, 8), window_of([(0, 0, 0, 1)]))


def test_min_events_marks_inactive():
    sp = SuperpixelMap(np.array([[0, 0, 1, 1]] * 4, dtype=np.uint32))
    win = window_of([(0, 0, 0, 1), (1, 1, 0, 1), (2, 3, 0, 1)])
    sev = group_superevents(sp, win, min_events=2)
    assert sev.active.tolist() == [True, False]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 300))
def test_grouping_conserves_events(seed, n):
    rng = np.random.default_rng(seed)
    s = random_stream(rng, n)
    lab = rng.integers(0, 5, (8, 8)).astype(np.uint32)
    lab[rng.random((8, 8)) < 0.2] = UNASSIGNED
    sev = group_superevents(SuperpixelMap(lab), EventWindow(s, 0, n))
    assigned = np.concatenate(sev.members) if sev.members else np.array([], int)
    assert len(assigned) + sev.unassigned == n
    assert len(np.unique(assigned)) == len(assigned)


def test_default_segment_count_by_frame_size():
    from openess.superpixel import default_segment_count

    assert default_segment_count(200, 352) == 25
    assert default_segment_count(440, 640) == 100
    assert default_segment_count(64, 64) == 25
