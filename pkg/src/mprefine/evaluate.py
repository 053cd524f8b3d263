"""Metrics, per-step feature extraction, a linear classifier, and the
exhaustive MAP oracle for the log-linear baseline model.

The brute-force oracle shares no code with the network forward pass; it is
an evaluation baseline and test oracle only.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import network as net
from .config import ModelConfig
from .data import DataError, Dataset, SceneInstance
from ._fileio import atomic_write_text

FEATURES_MAGIC = "MPFV1"

MAX_JOINT_STATES = 1_000_000


@dataclass
class EvalReport:
    """Per-head accuracies and confusion matrices (rows true, cols predicted),
    plus the scene accuracy measured after every message-passing step."""

    scene_accuracy: float
    action_accuracy: float
    pose_accuracy: float
    confusion_scene: np.ndarray
    confusion_action: np.ndarray
    confusion_pose: np.ndarray
    per_step_scene_accuracy: list
    num_instances: int


def evaluate(dataset: Dataset, params: net.NetworkParams, cfg: ModelConfig) -> EvalReport:
    """Argmax predictions per head over a labeled dataset.

    Masked persons are excluded; per-step scene accuracies come from each
    step's output scores, so step K's equals the headline scene accuracy.
    """
    ls = cfg.label_spaces
    num_steps = cfg.num_steps
    conf_scene = np.zeros((ls.num_scenes, ls.num_scenes), dtype=np.int64)
    conf_action = np.zeros((ls.num_actions, ls.num_actions), dtype=np.int64)
    conf_pose = np.zeros((ls.num_poses, ls.num_poses), dtype=np.int64)
    step_correct = np.zeros(num_steps, dtype=np.int64)
    n_scene = 0
    for inst in dataset.instances:
        if inst.truth_scene < 0:
            raise DataError("evaluate requires scene labels on every instance")
        tapes = net.network_forward(inst, params, cfg)
        for k, tape in enumerate(tapes):
            step_correct[k] += int(np.argmax(tape.scene_out) == inst.truth_scene)
        n_scene += 1
        final = tapes[-1]
        conf_scene[inst.truth_scene, int(np.argmax(final.scene_out))] += 1
        for m in np.flatnonzero(inst.person_mask):
            ta = int(inst.truth_actions[m])
            if ta >= 0:
                conf_action[ta, int(np.argmax(final.action_out[m]))] += 1
            tp = int(inst.truth_poses[m])
            if tp >= 0 and ls.poses_enabled:
                conf_pose[tp, int(np.argmax(final.pose_out[m]))] += 1

    def acc(conf: np.ndarray) -> float:
        total = conf.sum()
        return float(np.trace(conf) / total) if total else float("nan")

    return EvalReport(
        scene_accuracy=acc(conf_scene),
        action_accuracy=acc(conf_action),
        pose_accuracy=acc(conf_pose),
        confusion_scene=conf_scene,
        confusion_action=conf_action,
        confusion_pose=conf_pose,
        per_step_scene_accuracy=[
            float(c / n_scene) if n_scene else float("nan") for c in step_correct
        ],
        num_instances=n_scene,
    )


def format_eval_report(report: EvalReport, per_step: bool = False) -> str:
    lines = [
        f"scene_accuracy\t{report.scene_accuracy:.6f}",
        f"action_accuracy\t{report.action_accuracy:.6f}",
        f"pose_accuracy\t{report.pose_accuracy:.6f}",
    ]
    if per_step:
        for k, a in enumerate(report.per_step_scene_accuracy, start=1):
            lines.append(f"step_{k}_scene_accuracy\t{a:.6f}")
    for name, conf in (
        ("scene", report.confusion_scene),
        ("action", report.confusion_action),
        ("pose", report.confusion_pose),
    ):
        if conf.size == 0:
            continue
        lines.append(f"confusion {name} (rows true, cols predicted):")
        for row in conf:
            lines.append("\t".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Per-step features
# ---------------------------------------------------------------------------


@dataclass
class FeatureVector:
    """Config-fixed-length features taken after one message-passing step:
    scene scores, mean-pooled action and pose scores over active persons,
    and the pose-summary factor outputs.  Pooling keeps the length
    independent of how many persons are present."""

    values: np.ndarray
    step_index: int


def extract_features(inst: SceneInstance, params: net.NetworkParams, cfg: ModelConfig,
                     step_k: int, include_phi_factors: bool = False) -> FeatureVector:
    """Deterministic feature vector from the tape of step ``step_k`` (1-based).

    ``include_phi_factors`` appends the mean-pooled scene-action-pose factor
    outputs as well, for probing what the factor layer itself encodes.
    """
    if not 1 <= step_k <= cfg.num_steps:
        raise ValueError(f"step_k must be in 1..{cfg.num_steps}, got {step_k}")
    tapes = net.network_forward(inst, params, cfg)
    tape = tapes[step_k - 1]
    active = np.flatnonzero(inst.person_mask)
    blocks = [tape.scene_out]
    if active.size:
        blocks.append(tape.action_out[active].mean(axis=0))
        if cfg.poses_enabled:
            blocks.append(tape.pose_out[active].mean(axis=0))
    else:
        blocks.append(np.zeros(cfg.num_actions))
        if cfg.poses_enabled:
            blocks.append(np.zeros(cfg.num_poses))
    if cfg.poses_enabled:
        blocks.append(tape.factors.psi_out.reshape(-1))
    if include_phi_factors:
        if active.size:
            blocks.append(tape.factors.phi_out[active].mean(axis=0).reshape(-1))
        else:
            blocks.append(np.zeros(tape.factors.phi_out.shape[1:]).reshape(-1))
    return FeatureVector(values=np.concatenate(blocks), step_index=step_k)


def feature_matrix(dataset: Dataset, params: net.NetworkParams, cfg: ModelConfig,
                   step_k: int, include_phi_factors: bool = False):
    """Stack features and scene labels for a whole dataset."""
    rows = []
    labels = []
    for inst in dataset.instances:
        rows.append(extract_features(inst, params, cfg, step_k, include_phi_factors).values)
        labels.append(inst.truth_scene)
    return np.array(rows), np.array(labels, dtype=np.int64)


def save_features(path, features: np.ndarray, labels: np.ndarray) -> None:
    lines = [f"{FEATURES_MAGIC} DIM={features.shape[1]} N={features.shape[0]}"]
    for label, row in zip(labels, features):
        lines.append(str(int(label)) + " " + " ".join(repr(float(x)) for x in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_features(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError("empty feature file")
    header = lines[0].split()
    if len(header) != 3 or header[0] != FEATURES_MAGIC:
        raise DataError(f"bad feature header: {lines[0]!r}")
    dim = int(header[1].split("=")[1])
    count = int(header[2].split("=")[1])
    if len(lines) - 1 != count:
        raise DataError(f"feature file claims {count} rows, has {len(lines) - 1}")
    labels = np.zeros(count, dtype=np.int64)
    features = np.zeros((count, dim))
    for i, line in enumerate(lines[1:]):
        parts = line.split()
        if len(parts) != dim + 1:
            raise DataError(f"feature row {i}: expected {dim + 1} fields, got {len(parts)}")
        labels[i] = int(parts[0])
        features[i] = [float(v) for v in parts[1:]]
    return features, labels


# ---------------------------------------------------------------------------
# Regularized linear classifier
# ---------------------------------------------------------------------------


@dataclass
class LinearClassifier:
    weights: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)
    feature_mean: np.ndarray
    feature_scale: np.ndarray


def train_linear_classifier(features, labels, l2: float = 1e-4, epochs: int = 300,
                            learning_rate: float = 1.0, seed: int = 0) -> LinearClassifier:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardized internally.  The L2 term is applied as a
    proximal shrink (w /= 1 + lr*l2), which stays stable for arbitrarily
    large l2 and drives the weights to zero in the l2 -> infinity limit.
    Zero initialization makes the fit deterministic regardless of seed.
    """
    del seed  # deterministic by construction; kept for interface stability
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("features must be (N, D) with one label per row")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("need at least two distinct classes to train a classifier")
    n_classes = int(classes.max()) + 1
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-8] = 1.0
    xs = (x - mean) / scale
    n = xs.shape[0]
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0

    w = np.zeros((n_classes, xs.shape[1]))
    b = np.zeros(n_classes)
    for _ in range(epochs):
        logits = xs @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - onehot) / n
        w -= learning_rate * (delta.T @ xs)
        w /= 1.0 + learning_rate * l2
        b -= learning_rate * delta.sum(axis=0)
    return LinearClassifier(weights=w, bias=b, feature_mean=mean, feature_scale=scale)


def classify(clf: LinearClassifier, features):
    """Predicted label(s); accepts one feature vector or a matrix of rows."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    xs = (x - clf.feature_mean) / clf.feature_scale
    scores = xs @ clf.weights.T + clf.bias
    preds = scores.argmax(axis=1)
    return int(preds[0]) if single else preds


# ---------------------------------------------------------------------------
# Brute-force MAP oracle for the log-linear model
# ---------------------------------------------------------------------------


@dataclass
class Energies:
    """Log-linear weights of the baseline joint model.

    Unary weights scale the instance's own score vectors; the optional
    tables couple the scene label with each person's action/pose; the
    coherence bonus rewards every active person sharing one pose, which
    couples persons and keeps the MAP problem genuinely joint.
    """

    scene_unary_weight: float = 1.0
    action_unary_weight: float = 1.0
    pose_unary_weight: float = 1.0
    scene_action: np.ndarray | None = None  # (G, H)
    scene_pose: np.ndarray | None = None  # (G, Z)
    pose_coherence_bonus: float = 0.0


def brute_force_map(inst: SceneInstance, energies: Energies, cfg: ModelConfig):
    """Exact MAP labeling by exhaustive enumeration of all joint states.

    Ties break toward the lexicographically smallest labeling, ordered as
    (scene, actions..., poses...).  Guarded to at most MAX_JOINT_STATES
    joint states.  Returns (scene, actions, poses) with -1 at masked slots.
    """
    ls = cfg.label_spaces
    active = [int(m) for m in np.flatnonzero(inst.person_mask)]
    n_active = len(active)
    per_person = ls.num_actions * max(ls.num_poses, 1)
    total = ls.num_scenes * (per_person ** n_active)
    if total > MAX_JOINT_STATES:
        raise ValueError(
            f"joint state space has {total} labelings, exceeds guard {MAX_JOINT_STATES}"
        )

    poses_on = ls.poses_enabled
    pose_range = range(ls.num_poses) if poses_on else (None,)
    best_score = -np.inf
    best = None
    for g in range(ls.num_scenes):
        base = energies.scene_unary_weight * float(inst.scene_unary[g])
        for hs in itertools.product(range(ls.num_actions), repeat=n_active):
            e_actions = base
            for m, h in zip(active, hs):
                e_actions += energies.action_unary_weight * float(inst.action_unary[m, h])
                if energies.scene_action is not None:
                    e_actions += float(energies.scene_action[g, h])
            for zs in itertools.product(pose_range, repeat=n_active):
                e = e_actions
                if poses_on:
                    for m, z in zip(active, zs):
                        e += energies.pose_unary_weight * float(inst.pose_unary[m, z])
                        if energies.scene_pose is not None:
                            e += float(energies.scene_pose[g, z])
                    if (
                        energies.pose_coherence_bonus
                        and n_active > 0
                        and len(set(zs)) == 1
                    ):
                        e += energies.pose_coherence_bonus
                if e > best_score:
                    best_score = e
                    best = (g, hs, zs)

    actions = np.full(cfg.max_persons, -1, dtype=np.int64)
    poses = np.full(cfg.max_persons, -1, dtype=np.int64)
    if best is None:  # no scenes is impossible for a valid config
        raise ValueError("empty label space")
    g, hs, zs = best
    for m, h in zip(active, hs):
        actions[m] = h
    if poses_on:
        for m, z in zip(active, zs):
            poses[m] = z
    return g, actions, poses
