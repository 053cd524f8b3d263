"""Losses, SGD, the alternating two-phase schedule, and gradient checking.

Training proceeds step by step: for each message-passing depth k the first
k-1 steps start from the previous round's trained values, step k starts
fresh, and the whole k-step network is trained jointly, first on the scene
loss alone, then on the per-person action/pose losses.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import network as net
from .config import ModelConfig, validate_config
from .data import DataError, Dataset, SceneInstance

PHASES = ("scene_only", "persons_only", "joint")


class NumericError(RuntimeError):
    """A non-finite value surfaced during optimization."""


@dataclass
class LossConfig:
    """Which loss heads are active and with what weights."""

    scene_weight: float = 1.0
    action_weight: float = 1.0
    pose_weight: float = 1.0
    active_phase: str = "joint"

    def __post_init__(self):
        if self.active_phase not in PHASES:
            raise ValueError(f"active_phase must be one of {PHASES}")
        if min(self.scene_weight, self.action_weight, self.pose_weight) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def uses_scene(self) -> bool:
        return self.active_phase in ("scene_only", "joint") and self.scene_weight > 0

    @property
    def uses_actions(self) -> bool:
        return self.active_phase in ("persons_only", "joint") and self.action_weight > 0

    @property
    def uses_poses(self) -> bool:
        return self.active_phase in ("persons_only", "joint") and self.pose_weight > 0


def scene_only_loss() -> LossConfig:
    return LossConfig(active_phase="scene_only")


def persons_only_loss() -> LossConfig:
    return LossConfig(active_phase="persons_only")


def cross_entropy_loss(scores, truth: int):
    """Softmax cross entropy of one score vector against an integer label.

    Returns (loss, gradient wrt scores); the gradient is softmax(scores)
    minus the one-hot truth, so its components always sum to zero.
    Computed via logsumexp, so saturated scores cannot produce log(0).
    """
    v = np.asarray(scores, dtype=np.float64)
    if not 0 <= truth < v.shape[0]:
        raise ValueError(f"label {truth} out of range for {v.shape[0]} classes")
    shifted = v - v.max()
    e = np.exp(shifted)
    total = e.sum()
    loss = float(math.log(total) - shifted[truth])
    grad = e / total
    grad[truth] -= 1.0
    return loss, grad


def batch_loss(inst: SceneInstance, tapes, loss_cfg: LossConfig):
    """Weighted multi-head loss of one instance's final-step outputs.

    Person heads average over active persons; an instance with no active
    persons contributes zero loss and zero gradient to them.  Returns
    (loss, (grad_scene, grad_actions, grad_poses)).
    """
    tape = tapes[-1]
    poses_on = tape.pose_out.shape[1] > 0
    if not (loss_cfg.uses_scene or loss_cfg.uses_actions or (loss_cfg.uses_poses and poses_on)):
        raise ValueError(f"no active loss head in phase {loss_cfg.active_phase!r}")

    loss = 0.0
    gs = np.zeros_like(tape.scene_out)
    ga = np.zeros_like(tape.action_out)
    gr = np.zeros_like(tape.pose_out)

    if loss_cfg.uses_scene:
        if inst.truth_scene < 0:
            raise DataError("missing scene label for an active scene loss head")
        l, g = cross_entropy_loss(tape.scene_out, inst.truth_scene)
        loss += loss_cfg.scene_weight * l
        gs += loss_cfg.scene_weight * g

    active = np.flatnonzero(inst.person_mask)
    if active.size > 0:
        inv = 1.0 / active.size
        if loss_cfg.uses_actions:
            for m in active:
                truth = int(inst.truth_actions[m])
                if truth < 0:
                    raise DataError(f"missing action label for active person {m}")
                l, g = cross_entropy_loss(tape.action_out[m], truth)
                loss += loss_cfg.action_weight * inv * l
                ga[m] += loss_cfg.action_weight * inv * g
        if loss_cfg.uses_poses and poses_on:
            for m in active:
                truth = int(inst.truth_poses[m])
                if truth < 0:
                    raise DataError(f"missing pose label for active person {m}")
                l, g = cross_entropy_loss(tape.pose_out[m], truth)
                loss += loss_cfg.pose_weight * inv * l
                gr[m] += loss_cfg.pose_weight * inv * g
    return loss, (gs, ga, gr)


def sgd_update(params: net.NetworkParams, grads: net.NetworkParams, lr: float) -> net.NetworkParams:
    """Plain in-place SGD: theta <- theta - lr * grad.

    Aborts with the parameter path and offending value if any gradient
    entry is non-finite.
    """
    for (name, p), (_, g) in zip(net.param_items(params), net.param_items(grads)):
        if not np.isfinite(g).all():
            bad = np.argwhere(~np.isfinite(g))[0]
            idx = tuple(int(i) for i in bad)
            raise NumericError(f"non-finite gradient at {name}{list(idx)}: {g[idx]}")
        p -= lr * g
    return params


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    """Final parameters plus per-epoch history and per-round snapshots."""

    params: net.NetworkParams
    epochs_run: int
    history: list = field(default_factory=list)
    round_params: list = field(default_factory=list)
    rng_state: dict | None = None


LOG_COLUMNS = (
    "epoch",
    "phase",
    "loss_scene",
    "loss_action",
    "loss_pose",
    "acc_scene",
    "acc_action",
    "acc_pose",
)


def format_training_log(history) -> str:
    """Render the per-epoch history as the tab-separated training log."""
    lines = ["\t".join(LOG_COLUMNS)]
    for row in history:
        lines.append(
            "\t".join(
                [
                    str(row["epoch"]),
                    row["phase"],
                    f"{row['loss_scene']:.6f}",
                    f"{row['loss_action']:.6f}",
                    f"{row['loss_pose']:.6f}",
                    f"{row['acc_scene']:.6f}",
                    f"{row['acc_action']:.6f}",
                    f"{row['acc_pose']:.6f}",
                ]
            )
        )
    return "\n".join(lines) + "\n"


class _EpochMetrics:
    """Running per-head losses and accuracies over one epoch."""

    def __init__(self):
        self.loss = {"scene": 0.0, "action": 0.0, "pose": 0.0}
        self.correct = {"scene": 0, "action": 0, "pose": 0}
        self.count = {"scene": 0, "action": 0, "pose": 0}

    def update(self, inst: SceneInstance, tapes):
        tape = tapes[-1]
        if inst.truth_scene >= 0:
            l, _ = cross_entropy_loss(tape.scene_out, inst.truth_scene)
            self.loss["scene"] += l
            self.correct["scene"] += int(np.argmax(tape.scene_out) == inst.truth_scene)
            self.count["scene"] += 1
        for m in np.flatnonzero(inst.person_mask):
            ta = int(inst.truth_actions[m])
            if ta >= 0:
                l, _ = cross_entropy_loss(tape.action_out[m], ta)
                self.loss["action"] += l
                self.correct["action"] += int(np.argmax(tape.action_out[m]) == ta)
                self.count["action"] += 1
            tp = int(inst.truth_poses[m])
            if tp >= 0 and tape.pose_out.shape[1] > 0:
                l, _ = cross_entropy_loss(tape.pose_out[m], tp)
                self.loss["pose"] += l
                self.correct["pose"] += int(np.argmax(tape.pose_out[m]) == tp)
                self.count["pose"] += 1

    def row(self, epoch: int, phase: str) -> dict:
        def mean(d, head):
            return d[head] / self.count[head] if self.count[head] else float("nan")

        return {
            "epoch": epoch,
            "phase": phase,
            "loss_scene": mean(self.loss, "scene"),
            "loss_action": mean(self.loss, "action"),
            "loss_pose": mean(self.loss, "pose"),
            "acc_scene": mean(self.correct, "scene"),
            "acc_action": mean(self.correct, "action"),
            "acc_pose": mean(self.correct, "pose"),
        }


def default_schedule(cfg: ModelConfig):
    """The alternating two-phase schedule applied within every round."""
    return [
        (scene_only_loss(), cfg.phase_epochs[0]),
        (persons_only_loss(), cfg.phase_epochs[1]),
    ]


def train(dataset: Dataset, cfg: ModelConfig, schedule=None) -> TrainState:
    """Sequential step-wise training with the alternating loss schedule.

    Round k trains a k-step network whose first k-1 steps continue from
    round k-1 and whose step k is freshly initialized; within a round every
    (loss phase, epoch count) entry of the schedule runs in order, updating
    all parameters of the k-step network.  Deterministic for a fixed
    (dataset, cfg) pair.
    """
    validate_config(cfg)
    if schedule is None:
        schedule = default_schedule(cfg)
    fresh = net.init_network_params(cfg)
    shuffle_rng = np.random.default_rng([cfg.rng_seed, 0x5EED])
    trained_steps: list = []
    history: list = []
    round_snapshots: list = []
    epoch_counter = 0
    indices = np.arange(len(dataset.instances))

    for k in range(cfg.num_steps):
        params = net.NetworkParams(steps=[*trained_steps, copy.deepcopy(fresh.steps[k])])
        for loss_cfg, n_epochs in schedule:
            for _ in range(n_epochs):
                epoch_counter += 1
                metrics = _EpochMetrics()
                order = shuffle_rng.permutation(indices)
                for idx in order:
                    inst = dataset.instances[idx]
                    tapes = net.network_forward(inst, params, cfg)
                    metrics.update(inst, tapes)
                    _, head_grads = batch_loss(inst, tapes, loss_cfg)
                    grads, _ = net.network_backward(
                        tapes, head_grads, params, inst.person_mask, cfg
                    )
                    sgd_update(params, grads, cfg.learning_rate)
                history.append(metrics.row(epoch_counter, loss_cfg.active_phase))
        trained_steps = params.steps
        round_snapshots.append(net.clone_params(params))

    final = net.NetworkParams(steps=trained_steps)
    return TrainState(
        params=final,
        epochs_run=epoch_counter,
        history=history,
        round_params=round_snapshots,
        rng_state=shuffle_rng.bit_generator.state,
    )


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckFailure:
    coordinate: str
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    epsilon: float
    trials: int
    num_coordinates: int
    max_rel_error: float
    failures: list

    @property
    def passed(self) -> bool:
        return not self.failures


# Below this magnitude the comparison is effectively absolute; central
# differences carry ~1e-9 evaluation noise that would otherwise dominate
# the ratio for near-zero gradients.
_REL_FLOOR = 1e-4


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), _REL_FLOOR)


def _random_instance(cfg: ModelConfig, rng) -> SceneInstance:
    ls = cfg.label_spaces
    n_active = int(rng.integers(1, cfg.max_persons + 1))
    mask = np.zeros(cfg.max_persons, dtype=bool)
    mask[:n_active] = True
    scene_unary = np.exp(rng.normal(size=ls.num_scenes))
    scene_unary /= scene_unary.sum()
    action_unary = np.zeros((cfg.max_persons, ls.num_actions))
    pose_unary = np.zeros((cfg.max_persons, ls.num_poses))
    for m in range(n_active):
        row = np.exp(rng.normal(size=ls.num_actions))
        action_unary[m] = row / row.sum()
        if ls.poses_enabled:
            row = np.exp(rng.normal(size=ls.num_poses))
            pose_unary[m] = row / row.sum()
    truth_actions = np.full(cfg.max_persons, -1, dtype=np.int64)
    truth_poses = np.full(cfg.max_persons, -1, dtype=np.int64)
    truth_actions[:n_active] = rng.integers(ls.num_actions, size=n_active)
    if ls.poses_enabled:
        truth_poses[:n_active] = rng.integers(ls.num_poses, size=n_active)
    return SceneInstance(
        scene_unary=scene_unary,
        action_unary=action_unary,
        pose_unary=pose_unary,
        person_mask=mask,
        truth_scene=int(rng.integers(ls.num_scenes)),
        truth_actions=truth_actions,
        truth_poses=truth_poses,
    )


def _random_params(cfg: ModelConfig, rng) -> net.NetworkParams:
    params = net.init_network_params(cfg)
    for _, arr in net.param_items(params):
        arr[...] = rng.uniform(-0.5, 0.5, arr.shape)
    return params


def grad_check(cfg: ModelConfig, tolerance: float = 1e-4, epsilon: float = 1e-5,
               trials: int = 3) -> GradCheckReport:
    """Compare analytic gradients with central differences, coordinate by
    coordinate, for every parameter and every unary input.

    Each trial draws fresh random parameters, a random instance (random
    active-person count, so dummy padding is exercised), and random labels
    for all heads, then checks the joint loss.  Failures are collected, not
    raised.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    loss_cfg = LossConfig(active_phase="joint")
    if not cfg.poses_enabled:
        loss_cfg = LossConfig(active_phase="joint", pose_weight=0.0)

    max_rel = 0.0
    failures: list = []
    checked = 0
    for trial in range(trials):
        rng = np.random.default_rng([cfg.rng_seed, 0xC4EC, trial])
        params = _random_params(cfg, rng)
        inst = _random_instance(cfg, rng)

        def loss_value() -> float:
            tapes = net.network_forward(inst, params, cfg)
            return batch_loss(inst, tapes, loss_cfg)[0]

        tapes = net.network_forward(inst, params, cfg)
        _, head_grads = batch_loss(inst, tapes, loss_cfg)
        analytic_params, analytic_inputs = net.network_backward(
            tapes, head_grads, params, inst.person_mask, cfg
        )

        def check(coord: str, analytic: float, target: np.ndarray, flat_index: int):
            nonlocal max_rel, checked
            flat = target.reshape(-1)
            saved = flat[flat_index]
            flat[flat_index] = saved + epsilon
            up = loss_value()
            flat[flat_index] = saved - epsilon
            down = loss_value()
            flat[flat_index] = saved
            numeric = (up - down) / (2.0 * epsilon)
            rel = _rel_error(analytic, numeric)
            checked += 1
            if rel > max_rel:
                max_rel = rel
            if rel > tolerance:
                failures.append(GradCheckFailure(coord, analytic, numeric, rel))

        grad_by_name = dict(net.param_items(analytic_params))
        for name, arr in net.param_items(params):
            ga = grad_by_name[name].reshape(-1)
            for i in range(arr.size):
                idx = np.unravel_index(i, arr.shape)
                check(f"trial{trial}:{name}{list(idx)}", float(ga[i]), arr, i)

        gs, ga_in, gr_in = analytic_inputs
        input_specs = [
            ("input.scene", inst.scene_unary, gs),
            ("input.action", inst.action_unary, ga_in),
            ("input.pose", inst.pose_unary, gr_in),
        ]
        for label, target, analytic_arr in input_specs:
            flat_grad = analytic_arr.reshape(-1)
            for i in range(target.size):
                idx = np.unravel_index(i, target.shape)
                check(f"trial{trial}:{label}{list(idx)}", float(flat_grad[i]), target, i)

    return GradCheckReport(
        tolerance=tolerance,
        epsilon=epsilon,
        trials=trials,
        num_coordinates=checked,
        max_rel_error=max_rel,
        failures=failures,
    )
