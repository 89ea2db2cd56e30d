import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from spriteparts.core import InputError, SuperpixelSegmentation
from spriteparts.superpixel import adjacency, neighbor_lists, segment

from conftest import make_pose


def brute_adjacency(labels):
    edges = set()
    h, w = labels.shape
    for r in range(h):
        for c in range(w):
            for dr, dc in ((0, 1), (1, 0)):
                r2, c2 = r + dr, c + dc
                if r2 < h and c2 < w:
                    a, b = labels[r, c], labels[r2, c2]
                    if a and b and a != b:
                        edges.add((min(a, b), max(a, b)))
    return edges


def check_invariants(seg, mask):
    labels = seg.labels
    assert np.array_equal(labels > 0, mask)
    assert labels.max() == seg.count and (seg.sizes > 0).all()
    ref = SuperpixelSegmentation.from_labels(labels)
    assert np.allclose(seg.centroids, ref.centroids) and np.array_equal(seg.sizes, ref.sizes)
    comp, _ = ndimage.label(mask)
    for k in range(1, seg.count + 1):
        assert len(np.unique(comp[labels == k])) == 1


def test_uniform_square_four_quadrants():
    mask = np.ones((64, 64), bool)
    seg = segment(make_pose(mask, np.full((64, 64, 3), 120, np.uint8)), target_count=4)
    assert seg.count == 4
    assert np.all(np.abs(seg.sizes - 1024) <= 0.15 * 1024)
    check_invariants(seg, mask)


def test_single_pixel():
    mask = np.zeros((20, 20), bool)
    mask[7, 11] = True
    seg = segment(make_pose(mask), target_count=10)
    assert seg.count == 1
    assert seg.centroids[0].tolist() == [11.0, 7.0]


def test_two_blobs_two_superpixels():
    mask = np.zeros((40, 40), bool)
    mask[2:12, 2:12] = True
    mask[25:35, 20:30] = True
    seg = segment(make_pose(mask, np.full((40, 40, 3), 80, np.uint8)), target_count=2)
    assert seg.count == 2
    assert len(np.unique(seg.labels[2:12, 2:12])) == 1
    assert len(np.unique(seg.labels[25:35, 20:30])) == 1


def test_empty_foreground_rejected():
    with pytest.raises(InputError):
        make_pose(np.zeros((5, 5), bool))


def test_count_within_thirty_percent_on_puppet(star2_sheet):
    _, poses = star2_sheet
    for g in poses[:3]:
        seg = segment(g.pose, target_count=200)
        assert 140 <= seg.count <= 260
        check_invariants(seg, g.pose.mask)


def test_deterministic(star2_sheet):
    pose = star2_sheet[1][0].pose
    assert np.array_equal(segment(pose, 120).labels, segment(pose, 120).labels)


def test_adjacency_trivial_cases():
    one = SuperpixelSegmentation.from_labels(np.ones((5, 5), int))
    assert adjacency(one) == set()
    lab = np.ones((4, 6), int)
    lab[:, 3:] = 2
    assert adjacency(SuperpixelSegmentation.from_labels(lab)) == {(1, 2)}
    diag = np.array([[1, 0], [0, 2]])
    assert adjacency(SuperpixelSegmentation.from_labels(diag)) == set()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 40))
def test_segment_and_adjacency_properties(seed, target):
    rng = np.random.default_rng(seed)
    mask = ndimage.binary_opening(rng.random((40, 48)) < 0.75, iterations=1)
    mask[20, 24] = True
    seg = segment(make_pose(mask, seed=seed), target_count=target)
    check_invariants(seg, mask)
    edges = adjacency(seg)
    assert edges == brute_adjacency(seg.labels)
    nbrs = neighbor_lists(seg, edges)
    for i, ns in enumerate(nbrs):
        assert i + 1 not in ns
        for j in ns:
            assert i + 1 in nbrs[j - 1]
