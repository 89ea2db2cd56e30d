from collections import deque

import numpy as np
import pytest
from skimage.morphology import skeletonize

from spriteparts import synth
from spriteparts.skeleton import Skeleton, build_skeleton, medial_geodesic, skeleton_from_labels


def check_invariants(skel, fg):
    roles = [j.role for j in skel.joints]
    assert roles.count("root") == 1
    by_id = {j.id: j for j in skel.joints}
    parents = {c: p for p, c in skel.bones}
    for j in skel.joints:
        if j.role == "pin":
            assert by_id[parents[j.id]].role == "root"
        if j.role == "tip":
            assert by_id[parents[j.id]].role == "pin"
            assert sum(1 for p, c in skel.bones if c == j.id) == 1
        assert fg[int(round(j.y)), int(round(j.x))]


def plus_sign():
    labels = np.zeros((120, 120), np.int32)
    labels[45:75, 45:75] = 1  # torso
    labels[52:68, 5:45] = 2  # left
    labels[52:68, 75:115] = 3  # right
    labels[5:45, 52:68] = 4  # up
    labels[75:115, 52:68] = 5  # down
    return labels


def test_single_circular_part():
    rows, cols = np.indices((64, 64))
    disk = (rows - 30) ** 2 + (cols - 34) ** 2 <= 15**2
    skel = build_skeleton([disk], disk)
    assert len(skel.joints) == 1 and skel.bones == []
    assert (skel.joints[0].x, skel.joints[0].y) == (34.0, 30.0)


def test_plus_sign_puppet():
    labels = plus_sign()
    skel = skeleton_from_labels(labels)
    check_invariants(skel, labels > 0)
    roles = [j.role for j in skel.joints]
    assert roles.count("pin") == 4 and roles.count("tip") == 4 and len(skel.bones) == 8
    root = skel.joints[0]
    assert abs(root.x - 59.5) <= 0.5 and abs(root.y - 59.5) <= 0.5
    pins = sorted((j.x, j.y) for j in skel.joints if j.role == "pin")
    tips = sorted((j.x, j.y) for j in skel.joints if j.role == "tip")
    # pins at the four torso edges, tips near the far ends of the limbs
    expect_pins = sorted([(44.5, 59.5), (74.5, 59.5), (59.5, 44.5), (59.5, 74.5)])
    expect_tips = sorted([(5, 59.5), (114, 59.5), (59.5, 5), (59.5, 114)])
    # medial axes of a 16 px wide limb stop about half a width short of its end
    for got_set, want_set, tol in ((pins, expect_pins, 3), (tips, expect_tips, 10)):
        for want in want_set:
            assert min(np.hypot(g[0] - want[0], g[1] - want[1]) for g in got_set) <= tol


def test_five_part_humanoid_has_nine_joints():
    rig = synth.make_puppet("humanoid", seed=0, limb_segments=1, head=False)
    assert len(rig.parts) == 5
    g = synth.sample_pose(rig, 1)
    skel = skeleton_from_labels(g.part_labels.labels, g.pose.mask)
    assert len(skel.joints) == 9 and len(skel.bones) == 8
    check_invariants(skel, g.pose.mask)


def bfs_lengths(medial, start):
    """Unit-step breadth-first distances over 8-connected medial pixels."""
    h, w = medial.shape
    dist = np.full(medial.shape, -1)
    dist[start] = 0
    q = deque([start])
    while q:
        r, c = q.popleft()
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and medial[rr, cc] and dist[rr, cc] < 0:
                    dist[rr, cc] = dist[r, c] + 1
                    q.append((rr, cc))
    return dist


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_tip_is_geodesically_farthest_medial_point(seed):
    rig = synth.make_puppet("star", seed=seed, k=3)
    g = synth.sample_pose(rig, seed)
    labels = g.part_labels.labels
    skel = skeleton_from_labels(labels, g.pose.mask)
    for pin, tip in [(skel.joints[i], skel.joints[i + 1]) for i in range(1, len(skel.joints), 2)]:
        limb = labels == labels[int(tip.y), int(tip.x)]
        pts, geo = medial_geodesic(limb, np.array([pin.x, pin.y]))
        # the tip is a medial pixel and no scanned medial pixel is farther
        k = np.flatnonzero((pts[:, 0] == tip.x) & (pts[:, 1] == tip.y))
        assert len(k) == 1 and geo[k[0]] == geo.max()
        # exhaustive BFS scan of the thinned limb agrees up to diagonal-step weighting
        medial = skeletonize(limb)
        assert medial[int(tip.y), int(tip.x)]
        start = tuple(np.argwhere(medial)[np.argmin(((np.argwhere(medial) - [pin.y, pin.x]) ** 2).sum(axis=1))])
        hops = bfs_lengths(medial, start)
        assert hops[int(tip.y), int(tip.x)] >= hops.max() - 3


def test_part_permutation_only_relabels_joints():
    labels = plus_sign()
    perm = np.array([0, 3, 5, 1, 2, 4])
    a = skeleton_from_labels(labels)
    b = skeleton_from_labels(perm[labels])
    key = lambda s: sorted((j.role, j.x, j.y) for j in s.joints)
    assert key(a) == key(b)


def test_json_round_trip():
    skel = skeleton_from_labels(plus_sign())
    again = Skeleton.from_json(skel.to_json())
    assert again.to_json() == skel.to_json()
    assert skel.dumps().endswith("\n")


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        build_skeleton([np.zeros((4, 4), bool)], np.zeros((4, 4), bool))
