"""The two factor layers: scene-action-pose (phi) and poses-all (psi).

Each factor neuron scores one joint configuration of the variables it
connects to.  Factor neurons of the same semantic type share a parameter
template: every person reuses the same (scene, action, pose) triple weight,
so the parameter count is independent of the person capacity.  Gradients
for a shared template are accumulated over all of its sharing sites;
masked (dummy) persons contribute exactly zero everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError


@dataclass
class PhiParams:
    """Templates of the scene-action-pose factor layer.

    alpha is (G, H, Z, 3) with weight roles (scene, action, pose); in the
    arity-2 variant (no poses) it is (G, H, 2) with roles (scene, action).
    """

    alpha: np.ndarray


@dataclass
class PsiParams:
    """Templates of the poses-all factor layer: one per (latent t, scene g).

    Untied: beta is (T, G, 1 + M*Z), concatenating a scene weight with one
    weight per (person slot, pose) pair.  Tied: (T, G, 1 + Z), the same pose
    weights applied at every person slot (permutation-invariant variant).
    """

    beta: np.ndarray
    tied: bool = False


@dataclass
class OutParams:
    """Second-pass weights from factor outputs back to the variable nodes.

    Sharing mirrors the first pass: w_phi is shaped like alpha, with roles
    (to-scene, to-action, to-pose); w_psi is (T, G, 2) with roles (to-scene,
    to-every-pose-node).
    """

    w_phi: np.ndarray
    w_psi: np.ndarray | None = None


@dataclass
class FactorActivations:
    """Cached factor pre-activations and outputs for one step's tape."""

    phi_pre: np.ndarray  # (M, G, H, Z) or (M, G, H)
    phi_out: np.ndarray
    psi_pre: np.ndarray | None  # (T, G)
    psi_out: np.ndarray | None


def activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(pre)
    if activation == "linear":
        return pre.copy()
    raise ConfigError(f"unknown activation {activation!r}")


def activation_grad(out: np.ndarray, activation: str) -> np.ndarray:
    """Derivative of the factor nonlinearity, expressed via the output."""
    if activation == "tanh":
        return 1.0 - out * out
    if activation == "linear":
        return np.ones_like(out)
    raise ConfigError(f"unknown activation {activation!r}")


def phi_forward(scene, actions, poses, params: PhiParams, mask, activation: str):
    """Pre-activations and outputs of every scene-action-pose factor neuron.

    scene: (G,), actions: (M, H), poses: (M, Z) or None.  Returns
    (pre, out), each (M, G, H, Z) (or (M, G, H) without poses), with masked
    persons' entries exactly zero.
    """
    maskf = np.asarray(mask, dtype=np.float64)
    alpha = params.alpha
    if poses is None or poses.shape[1] == 0:
        if alpha.ndim != 3:
            raise ConfigError("alpha must be (G, H, 2) when poses are disabled")
        pre = (
            alpha[None, :, :, 0] * scene[None, :, None]
            + alpha[None, :, :, 1] * actions[:, None, :]
        )
        pre *= maskf[:, None, None]
    else:
        if alpha.ndim != 4:
            raise ConfigError("alpha must be (G, H, Z, 3) when poses are enabled")
        pre = (
            alpha[None, :, :, :, 0] * scene[None, :, None, None]
            + alpha[None, :, :, :, 1] * actions[:, None, :, None]
            + alpha[None, :, :, :, 2] * poses[:, None, None, :]
        )
        pre *= maskf[:, None, None, None]
    return pre, activate(pre, activation)


def phi_backward(grad_out, phi_out, scene, actions, poses, params: PhiParams, mask, activation: str):
    """Chain-rule gradients through the phi layer.

    grad_out is the loss gradient at phi_out.  Returns (grad_alpha,
    grad_scene, grad_actions, grad_poses); grad_poses is None in arity-2
    mode.  Template gradients are summed over all persons (sharing sites).
    """
    maskf = np.asarray(mask, dtype=np.float64)
    alpha = params.alpha
    gpre = grad_out * activation_grad(phi_out, activation)
    if poses is None or poses.shape[1] == 0:
        gpre = gpre * maskf[:, None, None]
        galpha = np.empty_like(alpha)
        galpha[:, :, 0] = np.einsum("mgh,g->gh", gpre, scene)
        galpha[:, :, 1] = np.einsum("mgh,mh->gh", gpre, actions)
        gscene = np.einsum("mgh,gh->g", gpre, alpha[:, :, 0])
        gactions = np.einsum("mgh,gh->mh", gpre, alpha[:, :, 1])
        return galpha, gscene, gactions, None
    gpre = gpre * maskf[:, None, None, None]
    galpha = np.empty_like(alpha)
    galpha[:, :, :, 0] = np.einsum("mghz,g->ghz", gpre, scene)
    galpha[:, :, :, 1] = np.einsum("mghz,mh->ghz", gpre, actions)
    galpha[:, :, :, 2] = np.einsum("mghz,mz->ghz", gpre, poses)
    gscene = np.einsum("mghz,ghz->g", gpre, alpha[:, :, :, 0])
    gactions = np.einsum("mghz,ghz->mh", gpre, alpha[:, :, :, 1])
    gposes = np.einsum("mghz,ghz->mz", gpre, alpha[:, :, :, 2])
    return galpha, gscene, gactions, gposes


def psi_forward(scene, poses, params: PsiParams, mask, activation: str):
    """Pre-activations and outputs of the T-per-scene pose-summary factors.

    Consumes the scene score and the pose scores of every person slot;
    masked slots contribute zero.  Returns (pre, out), each (T, G).
    """
    if poses is None or poses.shape[1] == 0:
        raise ConfigError("poses-all factor layer requires num_poses > 0")
    maskf = np.asarray(mask, dtype=np.float64)
    beta = params.beta
    masked_poses = poses * maskf[:, None]
    if params.tied:
        pose_totals = masked_poses.sum(axis=0)  # (Z,)
        pre = beta[:, :, 0] * scene[None, :] + beta[:, :, 1:] @ pose_totals
    else:
        flat = masked_poses.reshape(-1)  # (M*Z,)
        if beta.shape[2] != 1 + flat.shape[0]:
            raise ConfigError(
                f"beta width {beta.shape[2]} does not match 1 + M*Z = {1 + flat.shape[0]}"
            )
        pre = beta[:, :, 0] * scene[None, :] + beta[:, :, 1:] @ flat
    return pre, activate(pre, activation)


def psi_backward(grad_out, psi_out, scene, poses, params: PsiParams, mask, activation: str):
    """Chain-rule gradients through the psi layer.

    Returns (grad_beta, grad_scene, grad_poses).  Pose-slot weights of
    masked persons receive exactly zero gradient (their inputs are zero),
    and masked persons receive zero input gradient.
    """
    maskf = np.asarray(mask, dtype=np.float64)
    beta = params.beta
    gpre = grad_out * activation_grad(psi_out, activation)  # (T, G)
    gbeta = np.empty_like(beta)
    gbeta[:, :, 0] = gpre * scene[None, :]
    gscene = np.einsum("tg,tg->g", gpre, beta[:, :, 0])
    num_m, num_z = poses.shape
    if params.tied:
        pose_totals = (poses * maskf[:, None]).sum(axis=0)
        gbeta[:, :, 1:] = gpre[:, :, None] * pose_totals[None, None, :]
        gposes = np.einsum("tg,tgz->z", gpre, beta[:, :, 1:])[None, :] * maskf[:, None]
    else:
        flat = (poses * maskf[:, None]).reshape(-1)
        gbeta[:, :, 1:] = gpre[:, :, None] * flat[None, None, :]
        gposes = np.einsum("tg,tgx->x", gpre, beta[:, :, 1:]).reshape(num_m, num_z)
        gposes = gposes * maskf[:, None]
    return gbeta, gscene, gposes
