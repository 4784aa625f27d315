import math
from pathlib import Path

import numpy as np
import pytest
import torch

from ratsir import handkin
from ratsir.handkin import HandModel, HandParams, build_template, forward, mirror_pose


def quaternion_rotation(axis_angle):
    """Independent axis-angle -> rotation matrix via quaternions."""
    angle = np.linalg.norm(axis_angle)
    if angle == 0:
        return np.eye(3)
    k = axis_angle / angle
    w = math.cos(angle / 2.0)
    x, y, z = math.sin(angle / 2.0) * k
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


class TestBuildTemplate:
    def test_deterministic(self):
        a = build_template(0, 778)
        b = build_template(0, 778)
        for f in ("vertices0", "joints0", "parent", "skin_weights", "shape_dirs", "joint_regressor"):
            assert np.array_equal(getattr(a, f), getattr(b, f))

    def test_skin_weight_rows(self, template778):
        sums = template778.skin_weights.sum(axis=1)
        assert np.all(template778.skin_weights >= 0)
        assert np.abs(sums - 1.0).max() <= 1e-9

    def test_regressor_reproduces_joints(self, template100):
        regressed = template100.joint_regressor @ template100.vertices0
        assert np.abs(regressed - template100.joints0).max() <= 1e-6
        assert np.abs(template100.joint_regressor.sum(axis=1) - 1.0).max() <= 1e-9

    def test_tree_shape(self, template778):
        assert template778.parent.shape == (16,)
        assert template778.parent[0] == -1
        assert np.all(template778.parent[1:] >= 0)
        assert np.all(template778.parent[1:] < np.arange(1, 16))  # acyclic, root-first

    def test_min_vertices_rejected(self):
        with pytest.raises(ValueError):
            build_template(0, 20)


class TestForward:
    def test_rest_pose_identity(self, template778):
        out = forward(template778, HandParams(np.zeros(48), np.zeros(10)))
        assert np.array_equal(out.vertices, template778.vertices0)
        assert np.abs(out.joints - template778.joints0).max() <= 1e-9

    def test_root_rotation_is_rigid(self, template778):
        r = np.array([0.4, -0.7, 0.25])
        theta = np.zeros(48)
        theta[:3] = r
        out = forward(template778, HandParams(theta, np.zeros(10)))
        R = quaternion_rotation(r)
        root = template778.joints0[0]
        expect_v = (template778.vertices0 - root) @ R.T + root
        expect_j = (template778.joints0 - root) @ R.T + root
        assert np.abs(out.vertices - expect_v).max() < 1e-6
        assert np.abs(out.joints - expect_j).max() < 1e-6

    def test_one_hot_blendshape(self, template778):
        beta = np.zeros(10)
        beta[4] = 1.0
        out = forward(template778, HandParams(np.zeros(48), beta))
        expect = template778.vertices0 + template778.shape_dirs[:, :, 4]
        assert np.abs(out.vertices - expect).max() < 1e-12

    def test_shape_superposition_at_rest(self, template778, rng):
        b1 = rng.uniform(-1.5, 1.5, 10)
        b2 = rng.uniform(-1.5, 1.5, 10)
        v0 = forward(template778, HandParams(np.zeros(48), np.zeros(10))).vertices
        va = forward(template778, HandParams(np.zeros(48), b1)).vertices
        vb = forward(template778, HandParams(np.zeros(48), b2)).vertices
        vab = forward(template778, HandParams(np.zeros(48), b1 + b2)).vertices
        assert np.abs((va - v0) + (vb - v0) - (vab - v0)).max() < 1e-12

    def test_mirror_consistency(self, template778, rng):
        theta = rng.uniform(-0.8, 0.8, 48)
        beta = rng.uniform(-1.0, 1.0, 10)
        right = forward(template778, HandParams(theta, beta, "right"))
        left = forward(template778, HandParams(mirror_pose(theta), beta, "left"))
        flip = np.array([-1.0, 1.0, 1.0])
        assert np.abs(left.vertices - right.vertices * flip).max() < 1e-6
        assert np.abs(left.joints - right.joints * flip).max() < 1e-6

    def test_param_validation(self):
        with pytest.raises(ValueError):
            HandParams(np.full(48, np.nan), np.zeros(10))
        with pytest.raises(ValueError):
            HandParams(np.zeros(48), np.full(10, 6.0))
        with pytest.raises(ValueError):
            HandParams(np.zeros(48), np.zeros(10), side="up")

    def test_batched_matches_single(self, template100, rng):
        model = HandModel(template100, dtype=torch.float64)
        thetas = rng.uniform(-0.5, 0.5, (3, 48))
        betas = rng.uniform(-1, 1, (3, 10))
        vb, jb = model.forward(torch.from_numpy(thetas), torch.from_numpy(betas))
        for i in range(3):
            out = forward(template100, HandParams(thetas[i], betas[i]))
            assert np.abs(vb[i].numpy() - out.vertices).max() < 1e-12
            assert np.abs(jb[i].numpy() - out.joints).max() < 1e-12


class TestRodrigues:
    def test_matches_quaternion_form(self, rng):
        rs = rng.uniform(-2.0, 2.0, (20, 3))
        R = handkin.rodrigues(torch.from_numpy(rs)).numpy()
        for i in range(20):
            assert np.abs(R[i] - quaternion_rotation(rs[i])).max() < 1e-12

    def test_taylor_branch_near_zero(self):
        r = torch.tensor([[1e-10, -2e-10, 5e-11]], dtype=torch.float64)
        R = handkin.rodrigues(r)[0]
        assert torch.abs(R - torch.eye(3, dtype=torch.float64)).max() < 1e-9
        # orthonormality survives the fallback
        assert torch.abs(R @ R.T - torch.eye(3, dtype=torch.float64)).max() < 1e-12


class TestTemplateIO:
    def test_roundtrip(self, template100, tmp_path):
        prefix = tmp_path / "tmpl"
        handkin.save_template(template100, prefix)
        loaded = handkin.load_template(prefix)
        assert np.array_equal(loaded.parent, template100.parent)
        for f in ("vertices0", "joints0", "skin_weights", "shape_dirs", "joint_regressor"):
            orig = getattr(template100, f)
            back = getattr(loaded, f)
            assert back.shape == orig.shape
            assert np.abs(back - orig).max() < 1e-6  # f32 wire format
