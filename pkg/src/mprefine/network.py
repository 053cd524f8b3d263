"""K residual message-passing steps over scene, action, and pose scores.

Each step feeds its (probability-normalized) inputs through the factor
layers, then adds the weighted factor outputs back onto the inputs, so a
zero-parameter step is the identity.  Between consecutive steps the scene
vector and each active person's action/pose vectors are softmax-normalized;
the final step's outputs are left unnormalized for the loss heads.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import layers
from .config import ModelConfig
from .data import masked_row_softmax, softmax
from .layers import FactorActivations, OutParams, PhiParams, PsiParams

INIT_SCALE = 0.01


@dataclass
class StepParams:
    """All templates of one message-passing step; psi absent without poses."""

    phi: PhiParams
    psi: PsiParams | None
    out: OutParams


@dataclass
class NetworkParams:
    """Per-step parameter sets, untied across steps.

    The same container doubles as the structure-mirroring gradient
    accumulator: gradients are NetworkParams whose arrays hold dL/dtheta.
    """

    steps: list


@dataclass
class StepTape:
    """Cached activations of one step, as needed by its backward pass."""

    scene_in: np.ndarray
    action_in: np.ndarray
    pose_in: np.ndarray
    factors: FactorActivations
    scene_out: np.ndarray
    action_out: np.ndarray
    pose_out: np.ndarray


def _step_shapes(cfg: ModelConfig):
    ls = cfg.label_spaces
    if ls.poses_enabled:
        alpha_shape = (ls.num_scenes, ls.num_actions, ls.num_poses, 3)
        if cfg.tie_psi_positions:
            beta_shape = (cfg.latent_factors_per_scene, ls.num_scenes, 1 + ls.num_poses)
        else:
            beta_shape = (
                cfg.latent_factors_per_scene,
                ls.num_scenes,
                1 + cfg.max_persons * ls.num_poses,
            )
        w_psi_shape = (cfg.latent_factors_per_scene, ls.num_scenes, 2)
        return alpha_shape, beta_shape, w_psi_shape
    return (ls.num_scenes, ls.num_actions, 2), None, None


def init_network_params(cfg: ModelConfig, seed: int | None = None) -> NetworkParams:
    """Fresh templates, uniform in [-INIT_SCALE, INIT_SCALE].

    Small symmetric values keep the tanh factors in their near-linear
    regime initially, so an untrained network is close to the identity.
    """
    rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
    alpha_shape, beta_shape, w_psi_shape = _step_shapes(cfg)
    steps = []
    for _ in range(cfg.num_steps):
        alpha = rng.uniform(-INIT_SCALE, INIT_SCALE, alpha_shape)
        if beta_shape is not None:
            beta = rng.uniform(-INIT_SCALE, INIT_SCALE, beta_shape)
            w_phi = rng.uniform(-INIT_SCALE, INIT_SCALE, alpha_shape)
            w_psi = rng.uniform(-INIT_SCALE, INIT_SCALE, w_psi_shape)
            psi = PsiParams(beta=beta, tied=cfg.tie_psi_positions)
            out = OutParams(w_phi=w_phi, w_psi=w_psi)
        else:
            w_phi = rng.uniform(-INIT_SCALE, INIT_SCALE, alpha_shape)
            psi = None
            out = OutParams(w_phi=w_phi, w_psi=None)
        steps.append(StepParams(phi=PhiParams(alpha=alpha), psi=psi, out=out))
    return NetworkParams(steps=steps)


def zero_network_params(cfg: ModelConfig) -> NetworkParams:
    alpha_shape, beta_shape, w_psi_shape = _step_shapes(cfg)
    steps = []
    for _ in range(cfg.num_steps):
        alpha = np.zeros(alpha_shape)
        if beta_shape is not None:
            psi = PsiParams(beta=np.zeros(beta_shape), tied=cfg.tie_psi_positions)
            out = OutParams(w_phi=np.zeros(alpha_shape), w_psi=np.zeros(w_psi_shape))
        else:
            psi = None
            out = OutParams(w_phi=np.zeros(alpha_shape), w_psi=None)
        steps.append(StepParams(phi=PhiParams(alpha=alpha), psi=psi, out=out))
    return NetworkParams(steps=steps)


def clone_params(params: NetworkParams) -> NetworkParams:
    return copy.deepcopy(params)


def param_items(params: NetworkParams) -> Iterator[tuple[str, np.ndarray]]:
    """Yield (dotted name, array) pairs in a fixed declared order."""
    for k, sp in enumerate(params.steps):
        prefix = f"step{k + 1}"
        yield f"{prefix}.alpha", sp.phi.alpha
        if sp.psi is not None:
            yield f"{prefix}.beta", sp.psi.beta
        yield f"{prefix}.w_phi", sp.out.w_phi
        if sp.out.w_psi is not None:
            yield f"{prefix}.w_psi", sp.out.w_psi


def add_scaled(dst: NetworkParams, src: NetworkParams, scale: float = 1.0) -> NetworkParams:
    """In-place dst += scale * src over every parameter array."""
    for (_, d), (_, s) in zip(param_items(dst), param_items(src)):
        d += scale * s
    return dst


def step_forward(scene, actions, poses, step: StepParams, mask, cfg: ModelConfig) -> StepTape:
    """One residual refinement step on normalized input scores.

    Residual form: output = input + second-pass-weighted factor outputs.
    Masked persons' action/pose outputs are forced to zero.
    """
    maskf = np.asarray(mask, dtype=np.float64)
    poses_on = cfg.poses_enabled
    phi_pre, phi_out = layers.phi_forward(
        scene, actions, poses if poses_on else None, step.phi, mask, cfg.factor_activation
    )
    if poses_on:
        psi_pre, psi_out = layers.psi_forward(
            scene, poses, step.psi, mask, cfg.factor_activation
        )
        w_phi, w_psi = step.out.w_phi, step.out.w_psi
        scene_out = (
            scene
            + np.einsum("mghz,ghz->g", phi_out, w_phi[:, :, :, 0])
            + np.einsum("tg,tg->g", psi_out, w_psi[:, :, 0])
        )
        action_out = actions + np.einsum("mghz,ghz->mh", phi_out, w_phi[:, :, :, 1])
        pose_out = (
            poses
            + np.einsum("mghz,ghz->mz", phi_out, w_phi[:, :, :, 2])
            + (psi_out * w_psi[:, :, 1]).sum()
        )
        action_out *= maskf[:, None]
        pose_out *= maskf[:, None]
    else:
        psi_pre = psi_out = None
        w_phi = step.out.w_phi
        scene_out = scene + np.einsum("mgh,gh->g", phi_out, w_phi[:, :, 0])
        action_out = actions + np.einsum("mgh,gh->mh", phi_out, w_phi[:, :, 1])
        action_out *= maskf[:, None]
        pose_out = poses.copy()
    return StepTape(
        scene_in=scene,
        action_in=actions,
        pose_in=poses,
        factors=FactorActivations(phi_pre=phi_pre, phi_out=phi_out, psi_pre=psi_pre, psi_out=psi_out),
        scene_out=scene_out,
        action_out=action_out,
        pose_out=pose_out,
    )


def step_backward(tape: StepTape, grad_scene, grad_actions, grad_poses, step: StepParams,
                  mask, cfg: ModelConfig):
    """Backward pass of one step.

    Takes loss gradients at the step outputs and returns
    ((grad wrt step inputs), StepParams-shaped gradients).  The residual
    connection contributes the identity term to every input gradient.
    """
    maskf = np.asarray(mask, dtype=np.float64)
    act = cfg.factor_activation
    gs_out = np.asarray(grad_scene, dtype=np.float64)
    ga_out = np.asarray(grad_actions, dtype=np.float64) * maskf[:, None]
    gr_out = np.asarray(grad_poses, dtype=np.float64) * maskf[:, None]
    phi_out = tape.factors.phi_out

    if cfg.poses_enabled:
        w_phi, w_psi = step.out.w_phi, step.out.w_psi
        psi_out = tape.factors.psi_out

        gw_phi = np.empty_like(w_phi)
        gw_phi[:, :, :, 0] = np.einsum("mghz,g->ghz", phi_out, gs_out)
        gw_phi[:, :, :, 1] = np.einsum("mghz,mh->ghz", phi_out, ga_out)
        gw_phi[:, :, :, 2] = np.einsum("mghz,mz->ghz", phi_out, gr_out)
        pose_grad_total = gr_out.sum()
        gw_psi = np.empty_like(w_psi)
        gw_psi[:, :, 0] = psi_out * gs_out[None, :]
        gw_psi[:, :, 1] = psi_out * pose_grad_total

        gphi_out = (
            w_phi[None, :, :, :, 0] * gs_out[None, :, None, None]
            + w_phi[None, :, :, :, 1] * ga_out[:, None, :, None]
            + w_phi[None, :, :, :, 2] * gr_out[:, None, None, :]
        )
        gphi_out *= maskf[:, None, None, None]
        gpsi_out = w_psi[:, :, 0] * gs_out[None, :] + w_psi[:, :, 1] * pose_grad_total

        galpha, gs_phi, ga_phi, gr_phi = layers.phi_backward(
            gphi_out, phi_out, tape.scene_in, tape.action_in, tape.pose_in,
            step.phi, mask, act,
        )
        gbeta, gs_psi, gr_psi = layers.psi_backward(
            gpsi_out, psi_out, tape.scene_in, tape.pose_in, step.psi, mask, act
        )
        gs_in = gs_out + gs_phi + gs_psi
        ga_in = ga_out + ga_phi
        gr_in = gr_out + gr_phi + gr_psi
        grads = StepParams(
            phi=PhiParams(alpha=galpha),
            psi=PsiParams(beta=gbeta, tied=step.psi.tied),
            out=OutParams(w_phi=gw_phi, w_psi=gw_psi),
        )
    else:
        w_phi = step.out.w_phi
        gw_phi = np.empty_like(w_phi)
        gw_phi[:, :, 0] = np.einsum("mgh,g->gh", phi_out, gs_out)
        gw_phi[:, :, 1] = np.einsum("mgh,mh->gh", phi_out, ga_out)
        gphi_out = (
            w_phi[None, :, :, 0] * gs_out[None, :, None]
            + w_phi[None, :, :, 1] * ga_out[:, None, :]
        )
        gphi_out *= maskf[:, None, None]
        galpha, gs_phi, ga_phi, _ = layers.phi_backward(
            gphi_out, phi_out, tape.scene_in, tape.action_in, None, step.phi, mask, act
        )
        gs_in = gs_out + gs_phi
        ga_in = ga_out + ga_phi
        gr_in = gr_out.copy()
        grads = StepParams(
            phi=PhiParams(alpha=galpha),
            psi=None,
            out=OutParams(w_phi=gw_phi, w_psi=None),
        )
    ga_in *= maskf[:, None]
    gr_in *= maskf[:, None]
    return (gs_in, ga_in, gr_in), grads


def _softmax_grad_vec(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    # Jacobian-vector product of softmax, using its output y.
    return y * (gy - float(np.dot(gy, y)))


def _masked_row_softmax_grad(y: np.ndarray, gy: np.ndarray, mask) -> np.ndarray:
    out = np.zeros_like(gy)
    if y.shape[1] == 0:
        return out
    dots = (gy * y).sum(axis=1, keepdims=True)
    out = y * (gy - dots)
    out *= np.asarray(mask, dtype=np.float64)[:, None]
    return out


def network_forward(inst, params: NetworkParams, cfg: ModelConfig) -> list[StepTape]:
    """Run all steps on one instance; step 1 consumes the unary scores.

    Returns one tape per step; the last tape's outputs are the refined,
    unnormalized scores the loss heads consume.
    """
    scene = inst.scene_unary
    actions = inst.action_unary
    poses = inst.pose_unary
    mask = inst.person_mask
    tapes = []
    for k, step in enumerate(params.steps):
        if k > 0:
            scene = softmax(scene)
            actions = masked_row_softmax(actions, mask)
            poses = masked_row_softmax(poses, mask)
        tape = step_forward(scene, actions, poses, step, mask, cfg)
        tapes.append(tape)
        scene, actions, poses = tape.scene_out, tape.action_out, tape.pose_out
    return tapes


def refined_probabilities(tapes: list[StepTape], mask):
    """Softmax-normalized final scores for reporting.

    The loss heads consume the raw final outputs (cross entropy normalizes
    internally); this is the separate prediction path.  Argmax agrees with
    argmax of the raw scores.
    """
    final = tapes[-1]
    return (
        softmax(final.scene_out),
        masked_row_softmax(final.action_out, mask),
        masked_row_softmax(final.pose_out, mask),
    )


def network_backward(tapes: list[StepTape], head_grads, params: NetworkParams, mask,
                     cfg: ModelConfig):
    """Backpropagate loss gradients at the final outputs through all steps.

    Returns (NetworkParams-shaped gradients, gradients wrt the unary
    inputs as a (scene, actions, poses) triple).  The path through each
    inter-step softmax uses the exact softmax Jacobian; the residual skip
    keeps an identity term in every step's input gradient.
    """
    gs, ga, gr = head_grads
    gs = np.array(gs, dtype=np.float64)
    ga = np.array(ga, dtype=np.float64)
    gr = np.array(gr, dtype=np.float64)
    step_grads: list = [None] * len(params.steps)
    for k in range(len(params.steps) - 1, -1, -1):
        (gs, ga, gr), grads_k = step_backward(
            tapes[k], gs, ga, gr, params.steps[k], mask, cfg
        )
        step_grads[k] = grads_k
        if k > 0:
            # tape inputs are the post-softmax values of this boundary
            gs = _softmax_grad_vec(tapes[k].scene_in, gs)
            ga = _masked_row_softmax_grad(tapes[k].action_in, ga, mask)
            gr = _masked_row_softmax_grad(tapes[k].pose_in, gr, mask)
    return NetworkParams(steps=step_grads), (gs, ga, gr)
