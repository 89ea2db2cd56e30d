import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from spriteparts import synth
from spriteparts.core import CandidatePart, CorrespondenceMap, InputError, SelectionSolution, SuperpixelSegmentation
from spriteparts.metrics import pose_part_iou
from spriteparts.selection import (
    CoverageMatrix,
    PartRenderCache,
    coverage,
    lp_relaxation,
    pool_candidates,
    rank_solutions,
    solve_set_cover,
)
from spriteparts.superpixel import segment

from conftest import gt_corrs, make_pose


def grid_seg(h, w, cell, pose_id=0):
    rows, cols = np.indices((h, w))
    labels = (rows // cell) * ((w + cell - 1) // cell) + cols // cell + 1
    seg = SuperpixelSegmentation.from_labels(labels, pose_id)
    return seg


def exhaustive_optimum(covers):
    n = covers.shape[0]
    best = n
    for mask in range(1, 2**n):
        z = np.array([(mask >> i) & 1 for i in range(n)], bool)
        if z.sum() < best and covers[z].any(axis=0).all():
            best = int(z.sum())
    return best


# -- pooling ----------------------------------------------------------------------------------


def test_pool_whole_body_clusters():
    segs = {0: grid_seg(8, 8, 4, 0), 1: grid_seg(8, 8, 4, 1)}
    parts = pool_candidates({(0, 1): np.ones(4, int), (1, 0): np.ones(4, int)}, segs)
    assert len(parts) == 2
    assert [p.source_pose for p in parts] == [0, 1]
    assert all(p.pixel_mask.all() for p in parts)


def test_pool_deduplicates():
    segs = {i: grid_seg(8, 8, 4, i) for i in range(3)}
    lab = np.array([1, 1, 2, 2])
    one = pool_candidates({(0, 1): lab, (1, 0): lab}, segs)
    two = pool_candidates({(0, 1): lab, (0, 2): lab, (1, 0): lab}, segs)
    assert len(one) == len(two) == 4


def test_pool_covers_every_ground_truth_part(star4_extract, star4_sheet):
    _, res = star4_extract
    _, poses = star4_sheet
    parts = res.parts
    assert 5 <= len(parts) <= 6 * 5 * 5
    for g in poses:
        gt = g.part_labels.labels
        mine = [p for p in parts if p.source_pose == g.pose.pose_id]
        for v in np.unique(gt[gt > 0]):
            m = gt == v
            best = max((p.pixel_mask & m).sum() / (p.pixel_mask | m).sum() for p in mine)
            assert best >= 0.8


# -- coverage ---------------------------------------------------------------------------------


def test_whole_pose_part_covers_both_identical_poses():
    mask = np.ones((24, 24), bool)
    segs = {0: grid_seg(24, 24, 6, 0), 1: grid_seg(24, 24, 6, 1)}
    part = CandidatePart(0, 0, frozenset(range(1, 17)), mask)
    corrs = {(0, 1): CorrespondenceMap.identity(0, 1, mask), (1, 0): CorrespondenceMap.identity(1, 0, mask)}
    cov = coverage([part], segs, corrs)
    assert cov.covers.all() and len(cov.universe) == 32 and not cov.dropped


def test_part_without_matches_covers_nothing_elsewhere():
    mask = np.ones((24, 24), bool)
    segs = {0: grid_seg(24, 24, 6, 0), 1: grid_seg(24, 24, 6, 1)}
    part = CandidatePart(0, 0, frozenset({1, 2}), (segs[0].labels == 1) | (segs[0].labels == 2))
    corrs = {(0, 1): CorrespondenceMap.empty(0, 1, (24, 24)), (1, 0): CorrespondenceMap.empty(1, 0, (24, 24))}
    cov = coverage([part], segs, corrs)
    assert cov.universe == [(0, 1), (0, 2)]
    assert len(cov.dropped) == 30


def test_missing_correspondence_map_is_an_error():
    segs = {0: grid_seg(8, 8, 4, 0), 1: grid_seg(8, 8, 4, 1)}
    part = CandidatePart(0, 0, frozenset({1}), segs[0].labels == 1)
    with pytest.raises(InputError):
        coverage([part], segs, {})


def test_arm_coverage_matches_pixel_counting_oracle(star4_pair):
    rig, poses = star4_pair
    a, b = poses
    seg_a, seg_b = segment(a.pose, 200), segment(b.pose, 200)
    seg_a.pose_id, seg_b.pose_id = 0, 1
    arm_id = 2  # first limb
    gt_a, gt_b = a.part_labels.labels, b.part_labels.labels
    members = [k for k in range(1, seg_a.count + 1) if np.bincount(gt_a[seg_a.labels == k], minlength=6).argmax() == arm_id]
    part = CandidatePart.from_superpixels(0, seg_a, members)
    cov = coverage([part], {0: seg_a, 1: seg_b}, {(0, 1): a.corr_to[1], (1, 0): b.corr_to[0]})
    covered = {j for (p, j), k in zip(cov.universe, cov.covers[0]) if p == 1 and k}

    # oracle: generator transform of the arm, pixel-by-pixel back-mapping, 2 px distance tolerance
    m = b.transforms[arm_id - 1] @ np.linalg.inv(a.transforms[arm_id - 1])
    inv = np.linalg.inv(m)
    near = ndimage.distance_transform_edt(~part.pixel_mask) <= 2
    hits = np.zeros(seg_b.count + 1)
    for r, c in zip(*np.nonzero(seg_b.labels)):
        x, y, _ = inv @ np.array([c, r, 1.0])
        xi, yi = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
        if 0 <= xi < 256 and 0 <= yi < 256 and near[yi, xi]:
            hits[seg_b.labels[r, c]] += 1
    oracle = {j for j in range(1, seg_b.count + 1) if hits[j] / seg_b.sizes[j - 1] >= 0.5}
    assert covered == oracle
    share = np.array([(gt_b[seg_b.labels == j] == arm_id).mean() for j in range(1, seg_b.count + 1)])
    assert set(np.flatnonzero(share >= 0.9) + 1) <= covered
    assert not covered & set(np.flatnonzero(share <= 0.1) + 1)


# -- set cover --------------------------------------------------------------------------------


def test_single_covering_part():
    cov = CoverageMatrix(np.array([[1, 1, 1], [1, 0, 0], [0, 1, 1]], bool), [(0, 1), (0, 2), (0, 3)])
    sols, lp = solve_set_cover(cov)
    assert [s.selected for s in sols] == [[0]] and sols[0].cost == 1 and lp == pytest.approx(1)


def test_union_part_dominates_partition():
    k, per = 4, 3
    covers = np.zeros((k + 1, k * per), bool)
    for i in range(k):
        covers[i, i * per:(i + 1) * per] = True
    covers[k] = True
    sols, _ = solve_set_cover(CoverageMatrix(covers, list(range(k * per))))
    assert any(s.selected == [k] for s in sols)


def test_infeasible_instance_rejected():
    cov = CoverageMatrix(np.array([[1, 0]], bool), [0, 1])
    with pytest.raises(ValueError):
        lp_relaxation(cov)


def random_cover(rng, n_parts, n_elems):
    covers = rng.random((n_parts, n_elems)) < rng.uniform(0.1, 0.35)
    for j in np.flatnonzero(~covers.any(axis=0)):
        covers[rng.integers(n_parts), j] = True
    return CoverageMatrix(covers, list(range(n_elems)))


def test_set_cover_against_exhaustive_optimum_on_50_instances():
    rng = np.random.default_rng(2024)
    hits = 0
    for _ in range(50):
        cov = random_cover(rng, int(rng.integers(3, 16)), int(rng.integers(5, 41)))
        sols, lp = solve_set_cover(cov, seed=int(rng.integers(1000)))
        opt = exhaustive_optimum(cov.covers)
        best = min(s.cost for s in sols)
        assert best <= opt + 1
        hits += best == opt
        for s in sols:
            assert cov.is_cover(s.z)
            assert lp <= s.cost + 1e-9
    assert hits >= 40


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_set_cover_properties(seed):
    rng = np.random.default_rng(seed)
    cov = random_cover(rng, int(rng.integers(1, 20)), int(rng.integers(1, 50)))
    sols, lp = solve_set_cover(cov, rounds=5, seed=seed % 100)
    keys = [s.key() for s in sols]
    assert len(keys) == len(set(keys))
    for s in sols:
        assert cov.is_cover(s.z) and lp <= s.cost + 1e-9
        # pruned: dropping any selected part breaks coverage
        for c in s.selected:
            z = s.z.astype(bool).copy()
            z[c] = False
            assert not cov.is_cover(z)
    again, _ = solve_set_cover(cov, rounds=5, seed=seed % 100)
    assert [s.key() for s in again] == keys


# -- ranking ----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def gt_part_cache(star2_sheet):
    _, poses = star2_sheet
    sheet = synth.to_sprite_sheet(poses)
    gt = poses[0].part_labels.labels
    torso, arm1, arm2 = (gt == v for v in (1, 2, 3))
    parts = [CandidatePart(0, 0, {1}, torso), CandidatePart(1, 0, {2}, arm1), CandidatePart(2, 0, {3}, arm2),
             CandidatePart(3, 0, {4}, torso | arm1)]
    return PartRenderCache(parts, sheet, gt_corrs(poses))


def test_single_solution_returned_with_error(gt_part_cache):
    sol = SelectionSolution([1, 1, 1, 0])
    best, scored = rank_solutions([sol], gt_part_cache)
    assert best.selected == [0, 1, 2] and len(scored) == 1
    assert best.recon_error == scored[0].recon_error and len(best.pose_errors) == 6


def test_ground_truth_parts_reconstruct_within_quantization(gt_part_cache):
    best, _ = rank_solutions([SelectionSolution([1, 1, 1, 0])], gt_part_cache)
    assert best.recon_error <= 10


def test_ground_truth_beats_merged_limb(gt_part_cache):
    good, merged = SelectionSolution([1, 1, 1, 0]), SelectionSolution([0, 0, 1, 1])
    best, scored = rank_solutions([merged, good], gt_part_cache)
    assert best.selected == [0, 1, 2]
    assert scored[0].recon_error > scored[1].recon_error


def test_reconstruction_labels_agree_with_ground_truth(star4_extract, star4_sheet):
    _, res = star4_extract
    _, poses = star4_sheet
    for lab, g in zip(res.labels, poses):
        assert pose_part_iou(lab, g.part_labels.labels) >= 0.85
    assert res.cover.is_cover(res.best.z)
    assert res.lp_value <= res.best.cost + 1e-9
