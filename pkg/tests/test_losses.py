import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ratsir import fdiff
from ratsir.geom import WeakPerspectiveCamera
from ratsir.losses import (
    FrameBundle,
    LossWeights,
    TotalLossConfig,
    l_2d,
    l_3d,
    l_close,
    l_jrel,
    l_mano,
    maxmse,
    project_points,
    total_loss,
)
from ratsir.net import Prediction


def t64(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def random_prediction(rng):
    return Prediction(
        theta_R=t64(rng.uniform(-1, 1, 48)), theta_L=t64(rng.uniform(-1, 1, 48)),
        beta_R=t64(rng.uniform(-1, 1, 10)), beta_L=t64(rng.uniform(-1, 1, 10)),
        upsilon=t64(rng.uniform(-0.3, 0.3, 3)),
        cam_R=t64([100.0, 5.0, -3.0]), cam_L=t64([90.0, 1.0, 2.0]),
    )


class TestMaxMSE:
    def test_equal_residuals(self):
        gt = torch.zeros(5, 3, dtype=torch.float64)
        pred = gt.clone()
        pred[:, 0] = 1.0
        assert maxmse(pred, gt).item() == pytest.approx(1.0, abs=1e-12)

    def test_hand_evaluated_two_residuals(self):
        gt = torch.zeros(2, 3, dtype=torch.float64)
        pred = torch.tensor([[1.0, 0, 0], [3.0, 0, 0]], dtype=torch.float64)
        # (1 + 81) / (1 + 9)
        assert maxmse(pred, gt).item() == pytest.approx(8.2, abs=1e-12)

    def test_zero_residual_guard(self):
        x = torch.randn(7, 3, dtype=torch.float64)
        assert maxmse(x, x.clone()).item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            maxmse(torch.zeros(3, 3), torch.zeros(4, 3))

    @settings(max_examples=80, deadline=None)
    @given(st.integers(1, 30), st.integers(0, 10**6))
    def test_power_mean_bounds(self, n, seed):
        rng = np.random.default_rng(seed)
        delta = rng.uniform(-3, 3, (n, 3))
        gt = torch.zeros(n, 3, dtype=torch.float64)
        val = maxmse(t64(delta), gt).item()
        s2 = (delta**2).sum(axis=1)
        if s2.sum() == 0:
            assert val == 0.0
        else:
            assert s2.mean() - 1e-12 <= val <= s2.max() + 1e-12

    def test_gradient(self, rng):
        gt = t64(rng.uniform(-1, 1, (6, 3)))
        pred = t64(rng.uniform(-1, 1, (6, 3))).requires_grad_(True)
        report = fdiff.check_input_gradients(lambda pred: maxmse(pred, gt), {"pred": pred})
        assert report["pred"] < 1e-4


class TestLMano:
    def test_zero_at_equality(self, rng):
        p = random_prediction(rng)
        assert l_mano(p, p).item() == 0.0

    def test_single_entry(self, rng):
        p = random_prediction(rng)
        q = Prediction(**{**p.__dict__})
        theta = p.theta_R.clone()
        theta[7] += 2.0
        q = Prediction(theta_R=theta, theta_L=p.theta_L, beta_R=p.beta_R, beta_L=p.beta_L,
                       upsilon=p.upsilon, cam_R=p.cam_R, cam_L=p.cam_L)
        assert l_mano(q, p).item() == pytest.approx(4.0, abs=1e-12)

    def test_matches_oracle(self, rng):
        p, q = random_prediction(rng), random_prediction(rng)
        oracle = sum(
            float(((np.asarray(getattr(p, f)) - np.asarray(getattr(q, f))) ** 2).sum())
            for f in ("theta_R", "theta_L", "beta_R", "beta_L")
        )
        assert l_mano(p, q).item() == pytest.approx(oracle, abs=1e-9)


class TestL3D:
    def test_exact_match(self, rng):
        V = t64(rng.uniform(-1, 1, (50, 3)))
        J = t64(rng.uniform(-1, 1, (21, 3)))
        assert l_3d(V, J, V.clone(), J.clone()).item() == 0.0

    def test_joint_offset_value(self, rng):
        V = t64(rng.uniform(-1, 1, (50, 3)))
        J = t64(rng.uniform(-1, 1, (21, 3)))
        J_off = J + torch.tensor([0.01, 0.0, 0.0], dtype=torch.float64)
        # equal joint residuals: maxmse = ||d||^2 = 1e-4; vertices contribute 0
        assert l_3d(V, J_off, V.clone(), J).item() == pytest.approx(1e-4, rel=1e-9)

    def test_compositional(self, rng):
        V, Vg = t64(rng.uniform(-1, 1, (30, 3))), t64(rng.uniform(-1, 1, (30, 3)))
        J, Jg = t64(rng.uniform(-1, 1, (21, 3))), t64(rng.uniform(-1, 1, (21, 3)))
        total = l_3d(V, J, Vg, Jg).item()
        assert total == pytest.approx(maxmse(Vg, V).item() + maxmse(Jg, J).item(), rel=1e-12)

    def test_gradient(self, rng):
        Vg = t64(rng.uniform(-1, 1, (12, 3)))
        Jg = t64(rng.uniform(-1, 1, (21, 3)))
        V = t64(rng.uniform(-1, 1, (12, 3))).requires_grad_(True)
        J = t64(rng.uniform(-1, 1, (21, 3))).requires_grad_(True)
        rep = fdiff.check_input_gradients(lambda V, J: l_3d(V, J, Vg, Jg), {"V": V, "J": J})
        assert max(rep.values()) < 1e-4


class TestL2D:
    def test_exact_projection(self, rng):
        cam = WeakPerspectiveCamera(2.0, 1.0, -1.0)
        J = t64(rng.uniform(-1, 1, (21, 3)))
        j_gt = project_points(cam, J)
        assert l_2d(cam, J, j_gt).item() == 0.0

    def test_equal_residuals_345(self, rng):
        cam = WeakPerspectiveCamera(1.0, 0.0, 0.0)
        J = t64(rng.uniform(-1, 1, (21, 3)))
        j_gt = project_points(cam, J) + torch.tensor([3.0, 4.0], dtype=torch.float64)
        assert l_2d(cam, J, j_gt).item() == pytest.approx(25.0, rel=1e-12)

    def test_matches_oracle(self, rng):
        cam = t64([120.0, 3.0, 7.0])
        J = t64(rng.uniform(-0.2, 0.2, (21, 3)))
        j_gt = t64(rng.uniform(0, 48, (21, 2)))
        val = l_2d(cam, J, j_gt).item()
        proj = 120.0 * np.asarray(J)[:, :2] + np.array([3.0, 7.0])
        s2 = ((proj - np.asarray(j_gt)) ** 2).sum(axis=1)
        assert val == pytest.approx(float((s2**2).sum() / s2.sum()), rel=1e-10)

    def test_gradient_incl_camera(self, rng):
        j_gt = t64(rng.uniform(0, 48, (21, 2)))
        J = t64(rng.uniform(-0.2, 0.2, (21, 3))).requires_grad_(True)
        cam = t64([120.0, 3.0, 7.0]).requires_grad_(True)
        rep = fdiff.check_input_gradients(lambda cam, J: l_2d(cam, J, j_gt),
                                          {"cam": cam, "J": J})
        assert max(rep.values()) < 1e-4


class TestLJrel:
    def test_zero_at_equality(self, rng):
        JR = t64(rng.uniform(-0.2, 0.2, (21, 3)))
        JL = t64(rng.uniform(-0.2, 0.2, (21, 3)))
        assert l_jrel(JR, JL, JR.clone(), JL.clone()).item() == 0.0

    def test_rigid_left_shift(self, rng):
        JR = t64(rng.uniform(-0.2, 0.2, (21, 3)))
        JL = t64(rng.uniform(-0.2, 0.2, (21, 3)))
        d = torch.tensor([0.02, -0.01, 0.005], dtype=torch.float64)
        val = l_jrel(JR, JL + d, JR, JL).item()
        assert val == pytest.approx(21 * 21 * float((d**2).sum()), rel=1e-9)

    def test_translation_invariance(self, rng):
        JR = t64(rng.uniform(-0.2, 0.2, (21, 3)))
        JL = t64(rng.uniform(-0.2, 0.2, (21, 3)))
        JRg = t64(rng.uniform(-0.2, 0.2, (21, 3)))
        JLg = t64(rng.uniform(-0.2, 0.2, (21, 3)))
        off = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)
        a = l_jrel(JR, JL, JRg, JLg).item()
        b = l_jrel(JR + off, JL + off, JRg + off, JLg + off).item()
        assert a == pytest.approx(b, rel=1e-9)

    def test_gradient(self, rng):
        JRg = t64(rng.uniform(-0.2, 0.2, (21, 3)))
        JLg = t64(rng.uniform(-0.2, 0.2, (21, 3)))
        JR = t64(rng.uniform(-0.2, 0.2, (21, 3))).requires_grad_(True)
        JL = t64(rng.uniform(-0.2, 0.2, (21, 3))).requires_grad_(True)
        rep = fdiff.check_input_gradients(lambda JR, JL: l_jrel(JR, JL, JRg, JLg),
                                          {"JR": JR, "JL": JL})
        assert max(rep.values()) < 1e-4


class TestLClose:
    alpha = 0.005

    def test_gate_closed_everywhere(self, rng):
        # GT hands a meter apart: every pair distance exceeds sqrt(alpha).
        VRg = t64(rng.uniform(-0.05, 0.05, (30, 3)))
        VLg = VRg + torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        VR = t64(rng.uniform(-0.05, 0.05, (30, 3)))
        VL = t64(rng.uniform(-0.05, 0.05, (30, 3)))
        assert l_close(VR, VL, VRg, VLg, self.alpha).item() == 0.0

    def test_single_active_pair(self):
        # GT: one coincident pair, the rest far; pred offsets that pair by 1 mm.
        VRg = torch.zeros(2, 3, dtype=torch.float64)
        VRg[1] = torch.tensor([5.0, 0, 0])
        VLg = torch.zeros(2, 3, dtype=torch.float64)
        VLg[1] = torch.tensor([0, 5.0, 0])
        VR = VRg.clone()
        VL = VLg.clone()
        VL[0, 0] += 0.001
        val = l_close(VR, VL, VRg, VLg, self.alpha).item()
        assert val == pytest.approx(1e-6, rel=1e-9)

    def test_zero_at_equality(self, rng):
        VR = t64(rng.uniform(-0.02, 0.02, (40, 3)))
        VL = t64(rng.uniform(-0.02, 0.02, (40, 3)))
        assert l_close(VR, VL, VR.clone(), VL.clone(), self.alpha).item() == 0.0

    def test_unsquared_gate_mode(self):
        VRg = torch.zeros(1, 3, dtype=torch.float64)
        VLg = torch.tensor([[0.05, 0.0, 0.0]], dtype=torch.float64)  # 5 cm apart
        VL = VLg + 0.01
        # squared gate: 0.0025 <= 0.005 -> active; plain gate: 0.05 > 0.005 -> closed
        assert l_close(VRg, VL, VRg, VLg, self.alpha, gate_squared=True).item() > 0
        assert l_close(VRg, VL, VRg, VLg, self.alpha, gate_squared=False).item() == 0.0

    def test_subsample_indices(self, rng):
        VR = t64(rng.uniform(-0.02, 0.02, (50, 3)))
        VL = t64(rng.uniform(-0.02, 0.02, (50, 3)))
        VRg = t64(rng.uniform(-0.02, 0.02, (50, 3)))
        VLg = t64(rng.uniform(-0.02, 0.02, (50, 3)))
        idx = torch.arange(0, 50, 5)
        full = l_close(VR[idx], VL[idx], VRg[idx], VLg[idx], self.alpha).item()
        sub = l_close(VR, VL, VRg, VLg, self.alpha, idx_R=idx, idx_L=idx).item()
        assert sub == pytest.approx(full, rel=1e-12)

    def test_gradient_gate_fixed(self, rng):
        # Gate depends on GT only, so FD perturbations of the prediction keep
        # it fixed and the loss stays differentiable.
        VRg = t64(rng.uniform(-0.03, 0.03, (15, 3)))
        VLg = t64(rng.uniform(-0.03, 0.03, (15, 3)))
        VR = t64(rng.uniform(-0.03, 0.03, (15, 3))).requires_grad_(True)
        VL = t64(rng.uniform(-0.03, 0.03, (15, 3))).requires_grad_(True)
        rep = fdiff.check_input_gradients(
            lambda VR, VL: l_close(VR, VL, VRg, VLg, self.alpha), {"VR": VR, "VL": VL})
        assert max(rep.values()) < 1e-4


def make_bundle(rng, nv=40, with_j2d=False):
    b = FrameBundle(
        theta=t64(rng.uniform(-0.6, 0.6, (2, 48))),
        beta=t64(rng.uniform(-1, 1, (2, 10))),
        upsilon=t64(rng.uniform(-0.2, 0.2, 3)),
        cam=t64(np.concatenate([rng.uniform(50, 150, (2, 1)), rng.uniform(0, 40, (2, 2))], axis=1)),
        joints=t64(rng.uniform(-0.1, 0.1, (2, 21, 3))),
        verts=t64(rng.uniform(-0.1, 0.1, (2, nv, 3))),
    )
    if with_j2d:
        b.j2d = t64(rng.uniform(0, 48, (2, 21, 2)))
    return b


class TestTotalLoss:
    def test_all_weights_zero(self, rng):
        pred = make_bundle(rng)
        gt = make_bundle(rng, with_j2d=True)
        w = LossWeights(0, 0, 0, 0, 0)
        total, terms = total_loss(pred, gt, w)
        assert total.item() == 0.0
        assert set(terms) == {"mano", "3d", "2d", "jrel", "close"}

    def test_single_weight_selects_term(self, rng):
        pred = make_bundle(rng)
        gt = make_bundle(rng, with_j2d=True)
        w = LossWeights(0, 0, 0, 1.0, 0)
        total, terms = total_loss(pred, gt, w)
        assert total.item() == pytest.approx(terms["jrel"].item(), rel=1e-12)

    def test_matches_term_oracle(self, rng):
        pred = make_bundle(rng)
        gt = make_bundle(rng, with_j2d=True)
        w = LossWeights()
        total, terms = total_loss(pred, gt, w)

        mano = sum(float(((pred.theta[h] - gt.theta[h]) ** 2).sum()
                         + ((pred.beta[h] - gt.beta[h]) ** 2).sum()) for h in range(2))
        t3d = sum(
            l_3d(pred.verts[h] - pred.joints[h, 0], pred.joints[h] - pred.joints[h, 0],
                 gt.verts[h] - gt.joints[h, 0], gt.joints[h] - gt.joints[h, 0]).item()
            for h in range(2))
        t2d = sum(l_2d(pred.cam[h], pred.joints[h], gt.j2d[h]).item() for h in range(2))
        jrel = l_jrel(pred.joints[0], pred.joints[1], gt.joints[0], gt.joints[1]).item()
        close = l_close(pred.verts[0], pred.verts[1], gt.verts[0], gt.verts[1], w.alpha).item()
        oracle = mano + t3d + t2d + jrel + close
        assert total.item() == pytest.approx(oracle, rel=1e-9)

    def test_requires_gt_j2d(self, rng):
        pred = make_bundle(rng)
        gt = make_bundle(rng)
        with pytest.raises(ValueError):
            total_loss(pred, gt, LossWeights())

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=0.0)
        with pytest.raises(ValueError):
            LossWeights(w_2d=-1.0)

    def test_gradient_through_all_terms(self, rng):
        gt = make_bundle(rng, nv=12, with_j2d=True)
        gt.joints = gt.joints * 0.2  # pull pairs inside the close gate
        gt.verts = gt.verts * 0.2
        pred = make_bundle(rng, nv=12)
        pred.verts = pred.verts * 0.2
        for name in ("theta", "beta", "upsilon", "cam", "joints", "verts"):
            getattr(pred, name).requires_grad_(True)

        def fn(theta, beta, upsilon, cam, joints, verts):
            bundle = FrameBundle(theta=theta, beta=beta, upsilon=upsilon, cam=cam,
                                 joints=joints, verts=verts)
            total, _ = total_loss(bundle, gt, LossWeights())
            return total

        inputs = {n: getattr(pred, n) for n in ("theta", "beta", "upsilon", "cam", "joints", "verts")}
        rep = fdiff.check_input_gradients(fn, inputs)
        assert max(rep.values()) < 1e-4
