import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spriteparts.core import CorrespondenceMap, InputError, Pose
from spriteparts.correspondence import compute_descriptors, filter_mutual, match, match_poses

from conftest import make_pose


def unit_field(rng, h, w, d=20):
    f = rng.normal(size=(h, w, d))
    return f / np.linalg.norm(f, axis=-1, keepdims=True)


def brute_hard(src, tgt, src_mask, tgt_mask):
    tr, tc = np.nonzero(tgt_mask)
    out = {}
    for r, c in zip(*np.nonzero(src_mask)):
        best, arg = -np.inf, None
        for k, (r2, c2) in enumerate(zip(tr, tc)):
            v = float(src[r, c] @ tgt[r2, c2])
            if v > best:
                best, arg = v, (c2, r2)
        out[r, c] = arg
    return out


def test_constant_pose_descriptors_identical():
    mask = np.zeros((30, 30), bool)
    mask[5:25, 5:25] = True
    # constant image everywhere: silhouette edges against a different background do produce gradients
    desc = compute_descriptors(Pose(np.full((30, 30, 3), (200, 40, 90), np.uint8), mask))
    fg = desc[mask]
    assert np.allclose(fg, fg[0], atol=1e-12)
    hist = fg[0, 12:]
    assert np.allclose(hist, hist[0])  # uniform histogram replaces the all-zero one


def test_descriptor_locality():
    rng = np.random.default_rng(1)
    patch = rng.integers(0, 256, (17, 17, 3), dtype=np.uint8)
    img = rng.integers(0, 256, (60, 80, 3), dtype=np.uint8)
    img[10:27, 10:27] = patch
    img[30:47, 50:67] = patch
    mask = np.ones((60, 80), bool)
    desc = compute_descriptors(make_pose(mask, img))
    assert np.allclose(desc[18, 18], desc[38, 58], atol=1e-9)


def test_descriptor_norms_on_puppet(star2_sheet):
    pose = star2_sheet[1][0].pose
    desc = compute_descriptors(pose)
    assert desc.shape == (*pose.shape, 20)
    assert np.abs(np.linalg.norm(desc[pose.mask], axis=1) - 1).max() <= 1e-6
    assert not desc[~pose.mask].any()


def test_self_match_is_identity():
    rng = np.random.default_rng(2)
    mask = rng.random((20, 24)) < 0.6
    f = unit_field(rng, 20, 24)
    c = match(f, f, mask, mask)
    assert np.array_equal(c.valid, mask)
    rows, cols = np.nonzero(mask)
    assert np.array_equal(c.targets[rows, cols], np.stack([cols, rows], 1).astype(np.float32))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_recovered_and_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    h, w = 8, 9
    tgt_mask = rng.random((h, w)) < 0.7
    tgt_mask[0, 0] = True
    tgt = unit_field(rng, h, w)
    tr, tc = np.nonzero(tgt_mask)
    perm = rng.permutation(len(tr))
    src = np.zeros_like(tgt)
    src_mask = np.zeros((h, w), bool)
    # source pixel i (in raster order of the target foreground) copies target pixel perm[i]
    src[tr, tc] = tgt[tr[perm], tc[perm]]
    src_mask[tr, tc] = True
    c = match(src, tgt, src_mask, tgt_mask)
    assert np.array_equal(c.targets[tr, tc], np.stack([tc[perm], tr[perm]], 1).astype(np.float32))
    for (r, cc), (x, y) in brute_hard(src, tgt, src_mask, tgt_mask).items():
        assert tuple(c.targets[r, cc]) == (x, y)


def test_soft_kappa_one_equals_hard():
    rng = np.random.default_rng(3)
    m = rng.random((15, 15)) < 0.8
    a, b = unit_field(rng, 15, 15), unit_field(rng, 15, 15)
    h = match(a, b, m, m, "hard")
    s = match(a, b, m, m, "soft", kappa=1)
    assert np.array_equal(h.targets, s.targets, equal_nan=True)


def test_soft_converges_to_hard_and_lands_on_foreground():
    rng = np.random.default_rng(4)
    m = rng.random((15, 15)) < 0.7
    a, b = unit_field(rng, 15, 15), unit_field(rng, 15, 15)
    h = match(a, b, m, m, "hard")
    s = match(a, b, m, m, "soft", kappa=3, temperature=1e-6)
    assert np.array_equal(h.targets, s.targets, equal_nan=True)
    warm = match(a, b, m, m, "soft", kappa=3, temperature=1.0)
    xy = warm.targets[warm.valid].astype(int)
    assert m[xy[:, 1], xy[:, 0]].all()
    assert ((warm.confidence >= 0) & (warm.confidence <= 1)).all()


def test_hard_match_invariant_to_descriptor_rotation():
    rng = np.random.default_rng(5)
    m = rng.random((12, 12)) < 0.8
    a, b = unit_field(rng, 12, 12), unit_field(rng, 12, 12)
    q, _ = np.linalg.qr(rng.normal(size=(20, 20)))
    base = match(a, b, m, m)
    rot = match(a @ q.T, b @ q.T, m, m)
    assert np.array_equal(base.targets, rot.targets, equal_nan=True)


def test_match_errors():
    f = np.zeros((4, 4, 20))
    m = np.ones((4, 4), bool)
    with pytest.raises(InputError):
        match(f, f, m, np.zeros((4, 4), bool))
    with pytest.raises(ValueError):
        match(f, np.zeros((4, 4, 19)), m, m)


def test_filter_mutual_consistent_unchanged():
    mask = np.zeros((10, 10), bool)
    mask[2:8, 3:9] = True
    fwd = CorrespondenceMap.identity(0, 1, mask)
    out = filter_mutual(fwd, CorrespondenceMap.identity(1, 0, mask))
    assert np.array_equal(out.targets, fwd.targets, equal_nan=True)


def test_filter_mutual_constant_backward():
    mask = np.ones((20, 20), bool)
    fwd = CorrespondenceMap.identity(0, 1, mask)
    bt = np.zeros((20, 20, 2), np.float32)
    bt[...] = (10, 10)
    out = filter_mutual(fwd, CorrespondenceMap(1, 0, bt), eps=3.0)
    rows, cols = np.indices((20, 20))
    assert np.array_equal(out.valid, np.hypot(cols - 10, rows - 10) <= 3.0)


def test_filter_mutual_pair_mismatch():
    c = CorrespondenceMap.identity(0, 1, np.ones((3, 3), bool))
    with pytest.raises(ValueError):
        filter_mutual(c, c)


def test_filter_removes_corrupted_matches(star4_pair):
    _, poses = star4_pair
    a, b = poses
    fwd, bwd = a.corr_to[1], b.corr_to[0]
    rng = np.random.default_rng(0)
    rows, cols = np.nonzero(fwd.valid)
    bad = rng.random(len(rows)) < 0.2
    tr, tc = np.nonzero(b.pose.mask)
    pick = rng.integers(0, len(tr), bad.sum())
    t = fwd.targets.copy()
    t[rows[bad], cols[bad]] = np.stack([tc[pick], tr[pick]], 1)
    out = filter_mutual(CorrespondenceMap(0, 1, t), bwd)
    removed = ~out.valid[rows[bad], cols[bad]]
    assert removed.mean() >= 0.95


def test_match_poses_on_puppet_is_mostly_right(star4_pair):
    _, poses = star4_pair
    a, b = poses
    fwd = match_poses(a.pose, b.pose)
    bwd = match_poses(b.pose, a.pose)
    c = filter_mutual(fwd, bwd)
    gt = a.corr_to[1]
    ok = c.valid & gt.valid
    err = np.linalg.norm(c.targets[ok] - gt.targets[ok], axis=1)
    assert (err <= 3).mean() >= 0.8
