import numpy as np
import pytest
import torch

from sparselift.geometry import CameraIntrinsics, H36M_SKELETON, Skeleton
from sparselift.network import ModelConfig, UpliftModel
from sparselift.sequencing import StrideSchedule


@pytest.fixture
def skeleton():
    return H36M_SKELETON


@pytest.fixture
def camera():
    return CameraIntrinsics(fx=1000.0, fy=1000.0, cx=500.0, cy=500.0, width=1000.0, height=1000.0)


@pytest.fixture
def pair_skeleton():
    # Minimal two-joint skeleton whose joints form one flip pair.
    return Skeleton(name="pair", joint_names=("l", "r"), root=0, flip_pairs=((0, 1),))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(**overrides) -> ModelConfig:
    defaults = dict(
        joints=5,
        schedule=StrideSchedule(9, 4, 1),
        d_joint=4,
        d_temp=8,
        blocks_spatial=1,
        blocks_temporal=1,
        blocks_strided=1,
        heads_spatial=2,
        heads_temporal=2,
        reduction_strides=(9,),
        drop_path_rate=0.0,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


@pytest.fixture
def tiny_model():
    torch.manual_seed(7)
    return UpliftModel(tiny_model_config())


def random_similarity(rng, max_angle=np.pi):
    """Random rotation (proper), positive scale and translation."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    theta = rng.uniform(-max_angle, max_angle)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    rot = np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)
    scale = rng.uniform(0.5, 2.0)
    trans = rng.normal(0, 100, size=3)
    return rot, scale, trans
