import numpy as np
import pytest

from spriteparts import synth
from spriteparts.core import Pose


def make_pose(mask, image=None, pose_id=0, seed=0):
    mask = np.asarray(mask, dtype=bool)
    if image is None:
        rng = np.random.default_rng(seed)
        image = rng.integers(0, 256, (*mask.shape, 3), dtype=np.uint8)
    image = np.where(mask[..., None], image, 0).astype(np.uint8)
    return Pose(image, mask, pose_id)


def gt_corrs(poses):
    return {(a.pose.pose_id, b): c for a in poses for b, c in a.corr_to.items()}


@pytest.fixture(scope="session")
def star2_sheet():
    """3-part star (torso + 2 limbs), 6 poses with exact correspondences."""
    rig = synth.make_puppet("star", seed=0, k=2)
    return rig, synth.make_sheet(rig, 6, seed=0)


@pytest.fixture(scope="session")
def star4_pair():
    rig = synth.make_puppet("star", seed=3, k=4)
    return rig, synth.make_sheet(rig, 2, seed=3)


@pytest.fixture(scope="session")
def star4_sheet():
    """5-part star (torso + 4 limbs), 6 poses."""
    rig = synth.make_puppet("star", seed=0, k=4)
    return rig, synth.make_sheet(rig, 6, seed=0)


@pytest.fixture(scope="session")
def star4_extract(star4_sheet):
    from spriteparts import pipeline

    _, poses = star4_sheet
    sheet = synth.to_sprite_sheet(poses)
    return sheet, pipeline.extract(sheet, pipeline.PipelineConfig(), gt_corrs(poses))
