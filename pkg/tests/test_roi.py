from collections import deque

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from groundbody.cloudcore import Heightmap
from groundbody.roi import bbox_iou, connected_components, crop_patch, propose_rois


def blank(m=32):
    return np.full((m, m), 255, dtype=np.uint8)


def flood_fill_regions(cells, thr=250):
    """Reference labeling: BFS over 8-neighbours."""
    fg = cells < thr
    seen = np.zeros_like(fg)
    out = []
    for r0, c0 in zip(*np.nonzero(fg)):
        if seen[r0, c0]:
            continue
        q, cells_ = deque([(r0, c0)]), []
        seen[r0, c0] = True
        while q:
            r, c = q.popleft()
            cells_.append((r, c))
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < fg.shape[0] and 0 <= cc < fg.shape[1] and fg[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        q.append((rr, cc))
        out.append(sorted(cells_))
    return sorted(out)


def as_sets(regions):
    return sorted(sorted(map(tuple, np.asarray(r.cells).tolist())) for r in regions)


def test_blank_has_no_regions():
    assert connected_components(blank()) == []
    assert propose_rois(blank()) == []


def test_diagonal_touch_is_one_region():
    m = blank(8)
    m[2, 2] = m[3, 3] = 10
    regs = connected_components(m)
    assert len(regs) == 1 and regs[0].area == 2


def test_l_shape_matches_flood_fill():
    m = blank(10)
    for r, c in [(1, 1), (2, 1), (3, 1), (3, 2), (3, 3)]:
        m[r, c] = 100
    regs = connected_components(m)
    assert len(regs) == 1
    assert regs[0].area == 5
    assert tuple(regs[0].bbox) == (1, 1, 3, 3)
    assert as_sets(regs) == flood_fill_regions(m)


@settings(max_examples=60, deadline=None)
@given(arrays(np.uint8, (12, 12), elements=st.sampled_from([0, 100, 249, 250, 255])))
def test_components_match_flood_fill(cells):
    regs = connected_components(cells)
    assert as_sets(regs) == flood_fill_regions(cells)
    assert sum(r.area for r in regs) == int((cells < 250).sum())


def test_block_roi():
    m = blank(64)
    m[10:30, 20:30] = 100
    rois = propose_rois(m, min_area=50)
    assert len(rois) == 1
    r = rois[0]
    assert tuple(r.bbox) == (8, 18, 24, 14) and r.area == 200
    assert r.patch.shape == (28, 28)
    assert set(np.unique(r.patch)) <= {100, 255}
    assert 255 in r.patch and 100 in r.patch


def test_area_filter():
    m = blank(64)
    m[2:5, 2:5] = 50  # 9 cells
    m[30:50, 30:50] = 80  # 400 cells
    rois = propose_rois(m, min_area=50)
    assert len(rois) == 1 and rois[0].area == 400


def test_margin_clamped_and_sorted():
    m = blank(32)
    m[0:6, 0:6] = 10
    m[20:31, 20:31] = 20
    rois = propose_rois(m, min_area=5)
    assert [r.area for r in rois] == [121, 36]
    assert tuple(rois[1].bbox) == (0, 0, 8, 8)
    assert tuple(rois[0].bbox) == (18, 18, 14, 14)


def test_nearest_neighbour_crop():
    m = np.arange(16, dtype=np.uint8).reshape(4, 4)
    p = crop_patch(m, (0, 0, 4, 4), size=8)
    assert np.array_equal(p, np.repeat(np.repeat(m, 2, 0), 2, 1))


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (16, 16), elements=st.sampled_from([30, 255, 255])), st.integers(1, 20), st.integers(1, 20))
def test_roi_count_monotone_in_min_area(cells, a, b):
    lo, hi = sorted((a, b))
    assert len(propose_rois(cells, min_area=hi)) <= len(propose_rois(cells, min_area=lo))


def test_speck_does_not_change_rois():
    m = blank(40)
    m[5:15, 5:20] = 70
    extra = m.copy()
    extra[35, 35] = 70
    a, b = propose_rois(m, min_area=30), propose_rois(extra, min_area=30)
    assert [(r.bbox, r.area) for r in a] == [(r.bbox, r.area) for r in b]
    assert all(np.array_equal(x.patch, y.patch) for x, y in zip(a, b))


def test_accepts_heightmap():
    cells = blank(32)
    cells[5:15, 5:15] = 1
    assert len(propose_rois(Heightmap(cells))) == 1


def test_bbox_iou():
    assert bbox_iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert bbox_iou((0, 0, 10, 10), (20, 20, 5, 5)) == 0.0
    assert abs(bbox_iou((0, 0, 10, 10), (5, 0, 10, 10)) - 50 / 150) < 1e-12
