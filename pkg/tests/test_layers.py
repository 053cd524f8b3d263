import numpy as np
import pytest

import mprefine as mp
from mprefine.layers import PhiParams, PsiParams


def unit_inputs(num_g, num_h, num_z, num_m, rng, n_active=None):
    scene = mp.softmax(rng.normal(size=num_g))
    mask = np.zeros(num_m, dtype=bool)
    mask[: num_m if n_active is None else n_active] = True
    actions = np.zeros((num_m, num_h))
    poses = np.zeros((num_m, num_z))
    for m in np.flatnonzero(mask):
        actions[m] = mp.softmax(rng.normal(size=num_h))
        if num_z:
            poses[m] = mp.softmax(rng.normal(size=num_z))
    return scene, actions, poses, mask


class TestPhiForward:
    def test_zero_templates_give_zero_outputs(self):
        rng = np.random.default_rng(0)
        scene, actions, poses, mask = unit_inputs(2, 3, 2, 2, rng)
        params = PhiParams(alpha=np.zeros((2, 3, 2, 3)))
        pre, out = mp.phi_forward(scene, actions, poses, params, mask, "tanh")
        assert not pre.any()
        assert not out.any()

    def test_scalar_value(self):
        # alpha=(1,1,1) on scores (0.2, 0.3, 0.5): tanh(1.0)
        params = PhiParams(alpha=np.ones((1, 1, 1, 3)))
        scene = np.array([0.2])
        actions = np.array([[0.3]])
        poses = np.array([[0.5]])
        _, out = mp.phi_forward(scene, actions, poses, params, np.array([True]), "tanh")
        assert out[0, 0, 0, 0] == pytest.approx(0.761594, abs=1e-6)

    def test_masked_person_is_zero_regardless_of_templates(self):
        rng = np.random.default_rng(1)
        scene, actions, poses, mask = unit_inputs(2, 2, 2, 3, rng, n_active=2)
        params = PhiParams(alpha=rng.uniform(-2, 2, (2, 2, 2, 3)))
        pre, out = mp.phi_forward(scene, actions, poses, params, mask, "tanh")
        assert not pre[2].any()
        assert not out[2].any()
        assert out[:2].any()

    def test_template_sharing_perturbation(self):
        # nudging one template moves exactly that (g,h,z) entry of every
        # active person, by delta * (s_g, a_h(m), r_z(m))
        rng = np.random.default_rng(2)
        scene, actions, poses, mask = unit_inputs(2, 3, 2, 3, rng)
        alpha = rng.uniform(-1, 1, (2, 3, 2, 3))
        pre0, _ = mp.phi_forward(scene, actions, poses, PhiParams(alpha), mask, "linear")
        g, h, z, delta = 1, 2, 0, 0.125
        for role, factor in ((0, scene[g]), (1, None), (2, None)):
            bumped = alpha.copy()
            bumped[g, h, z, role] += delta
            pre1, _ = mp.phi_forward(scene, actions, poses, PhiParams(bumped), mask, "linear")
            diff = pre1 - pre0
            for m in range(3):
                expected = {
                    0: scene[g],
                    1: actions[m, h],
                    2: poses[m, z],
                }[role]
                assert diff[m, g, h, z] == pytest.approx(delta * expected, rel=1e-12)
            diff[:, g, h, z] = 0.0
            assert not diff.any()

    def test_person_permutation_equivariance(self):
        # equal templates + linear activation: permuting persons permutes outputs
        rng = np.random.default_rng(3)
        scene, actions, poses, mask = unit_inputs(2, 2, 2, 3, rng)
        alpha = np.tile(rng.uniform(-1, 1, 3), (2, 2, 2, 1))
        perm = np.array([2, 0, 1])
        _, out = mp.phi_forward(scene, actions, poses, PhiParams(alpha), mask, "linear")
        _, out_p = mp.phi_forward(
            scene, actions[perm], poses[perm], PhiParams(alpha), mask[perm], "linear"
        )
        np.testing.assert_allclose(out_p, out[perm], atol=1e-15)


class TestPsiForward:
    def test_zero_templates(self):
        rng = np.random.default_rng(0)
        scene, _, poses, mask = unit_inputs(2, 2, 3, 2, rng)
        params = PsiParams(beta=np.zeros((2, 2, 1 + 2 * 3)))
        pre, out = mp.psi_forward(scene, poses, params, mask, "tanh")
        assert not pre.any() and not out.any()

    def test_requires_poses(self):
        with pytest.raises(mp.ConfigError, match="num_poses"):
            mp.psi_forward(np.ones(2), np.zeros((2, 0)), PsiParams(np.zeros((1, 2, 1))),
                           np.ones(2, bool), "tanh")

    def test_tied_equals_untied_with_replicated_template(self):
        rng = np.random.default_rng(4)
        num_m, num_z = 3, 2
        scene, _, _, mask = unit_inputs(2, 2, num_z, num_m, rng)
        shared_row = mp.softmax(rng.normal(size=num_z))
        poses = np.tile(shared_row, (num_m, 1))
        tied_beta = rng.uniform(-1, 1, (2, 2, 1 + num_z))
        untied_beta = np.concatenate(
            [tied_beta[:, :, :1]] + [tied_beta[:, :, 1:]] * num_m, axis=2
        )
        pre_t, _ = mp.psi_forward(scene, poses, PsiParams(tied_beta, tied=True), mask, "tanh")
        pre_u, _ = mp.psi_forward(scene, poses, PsiParams(untied_beta), mask, "tanh")
        np.testing.assert_allclose(pre_t, pre_u, atol=1e-14)

    def test_masked_slot_contributes_nothing(self):
        rng = np.random.default_rng(5)
        scene = mp.softmax(rng.normal(size=2))
        poses2 = np.vstack([mp.softmax(rng.normal(size=3)) for _ in range(2)])
        beta2 = rng.uniform(-1, 1, (2, 2, 1 + 2 * 3))
        pre2, _ = mp.psi_forward(
            scene, poses2, PsiParams(beta2), np.array([True, True]), "tanh"
        )
        # add a third, masked slot; its template weights are arbitrary
        poses3 = np.vstack([poses2, rng.normal(size=3)])
        poses3[2] *= 0  # data invariant: masked rows zero
        beta3 = np.concatenate([beta2, rng.uniform(-1, 1, (2, 2, 3))], axis=2)
        pre3, _ = mp.psi_forward(
            scene, poses3, PsiParams(beta3), np.array([True, True, False]), "tanh"
        )
        np.testing.assert_allclose(pre3, pre2, atol=1e-15)

    def test_masked_rows_are_ignored_even_if_nonzero(self):
        # the layer enforces the mask; junk in a dummy row cannot leak in
        rng = np.random.default_rng(6)
        scene = mp.softmax(rng.normal(size=2))
        beta = rng.uniform(-1, 1, (1, 2, 1 + 2 * 2))
        clean = np.vstack([mp.softmax(rng.normal(size=2)), np.zeros(2)])
        dirty = clean.copy()
        dirty[1] = [5.0, -3.0]
        mask = np.array([True, False])
        pre_clean, _ = mp.psi_forward(scene, clean, PsiParams(beta), mask, "tanh")
        pre_dirty, _ = mp.psi_forward(scene, dirty, PsiParams(beta), mask, "tanh")
        np.testing.assert_array_equal(pre_clean, pre_dirty)


def finite_diff(fn, arr, eps=1e-6):
    """Central differences of a scalar function wrt every entry of arr."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        up = fn()
        flat[i] = saved - eps
        down = fn()
        flat[i] = saved
        gflat[i] = (up - down) / (2 * eps)
    return grad


class TestLayerBackward:
    @pytest.mark.parametrize("activation", ["tanh", "linear"])
    def test_phi_gradients_match_finite_differences(self, activation):
        rng = np.random.default_rng(7)
        scene, actions, poses, mask = unit_inputs(2, 2, 2, 3, rng, n_active=2)
        alpha = rng.uniform(-1, 1, (2, 2, 2, 3))
        weights = rng.normal(size=(3, 2, 2, 2))  # arbitrary projection to a scalar

        def loss():
            _, out = mp.phi_forward(scene, actions, poses, PhiParams(alpha), mask, activation)
            return float((out * weights).sum())

        _, out = mp.phi_forward(scene, actions, poses, PhiParams(alpha), mask, activation)
        galpha, gs, ga, gr = mp.phi_backward(
            weights, out, scene, actions, poses, PhiParams(alpha), mask, activation
        )
        np.testing.assert_allclose(galpha, finite_diff(loss, alpha), atol=1e-8)
        np.testing.assert_allclose(gs, finite_diff(loss, scene), atol=1e-8)
        np.testing.assert_allclose(ga, finite_diff(loss, actions), atol=1e-8)
        np.testing.assert_allclose(gr, finite_diff(loss, poses), atol=1e-8)

    @pytest.mark.parametrize("tied", [False, True])
    def test_psi_gradients_match_finite_differences(self, tied):
        rng = np.random.default_rng(8)
        scene, _, poses, mask = unit_inputs(2, 2, 3, 3, rng, n_active=2)
        width = 1 + (3 if tied else 3 * 3)
        beta = rng.uniform(-1, 1, (2, 2, width))
        weights = rng.normal(size=(2, 2))
        params = PsiParams(beta, tied=tied)

        def loss():
            _, out = mp.psi_forward(scene, poses, params, mask, "tanh")
            return float((out * weights).sum())

        _, out = mp.psi_forward(scene, poses, params, mask, "tanh")
        gbeta, gs, gr = mp.psi_backward(weights, out, scene, poses, params, mask, "tanh")
        np.testing.assert_allclose(gbeta, finite_diff(loss, beta), atol=1e-8)
        np.testing.assert_allclose(gs, finite_diff(loss, scene), atol=1e-8)
        np.testing.assert_allclose(gr, finite_diff(loss, poses), atol=1e-8)

    def test_zero_upstream_gradient_gives_zero_everywhere(self):
        rng = np.random.default_rng(9)
        scene, actions, poses, mask = unit_inputs(2, 2, 2, 2, rng)
        alpha = rng.uniform(-1, 1, (2, 2, 2, 3))
        _, out = mp.phi_forward(scene, actions, poses, PhiParams(alpha), mask, "tanh")
        galpha, gs, ga, gr = mp.phi_backward(
            np.zeros_like(out), out, scene, actions, poses, PhiParams(alpha), mask, "tanh"
        )
        assert not galpha.any() and not gs.any() and not ga.any() and not gr.any()

    def test_duplicated_person_doubles_template_gradient(self):
        rng = np.random.default_rng(10)
        num_g, num_h, num_z = 2, 2, 2
        alpha = rng.uniform(-1, 1, (num_g, num_h, num_z, 3))
        scene = mp.softmax(rng.normal(size=num_g))
        row_a = mp.softmax(rng.normal(size=num_h))
        row_r = mp.softmax(rng.normal(size=num_z))
        gout_one = rng.normal(size=(1, num_g, num_h, num_z))

        def alpha_grad(rows):
            actions = np.tile(row_a, (rows, 1))
            poses = np.tile(row_r, (rows, 1))
            mask = np.ones(rows, dtype=bool)
            gout = np.tile(gout_one, (rows, 1, 1, 1))
            _, out = mp.phi_forward(scene, actions, poses, PhiParams(alpha), mask, "tanh")
            galpha, _, _, _ = mp.phi_backward(
                gout, out, scene, actions, poses, PhiParams(alpha), mask, "tanh"
            )
            return galpha

        np.testing.assert_allclose(alpha_grad(2), 2.0 * alpha_grad(1), rtol=1e-12)

    def test_masked_person_gradient_is_exactly_zero(self):
        rng = np.random.default_rng(11)
        scene, actions, poses, mask = unit_inputs(2, 2, 2, 3, rng, n_active=2)
        alpha = rng.uniform(-1, 1, (2, 2, 2, 3))
        _, out = mp.phi_forward(scene, actions, poses, PhiParams(alpha), mask, "tanh")
        gout = rng.normal(size=out.shape)  # junk gradient on masked entries too
        _, _, ga, gr = mp.phi_backward(
            gout, out, scene, actions, poses, PhiParams(alpha), mask, "tanh"
        )
        assert not ga[2].any()
        assert not gr[2].any()
