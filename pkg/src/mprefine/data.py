"""Scene instances, dataset file I/O, padding, and the synthetic generator.

A frame is modeled as one scene-level score vector plus per-person action
and pose score vectors, all softmax-normalized.  Frames with fewer than
``max_persons`` people are padded with zero-filled dummy slots whose
neurons stay deactivated throughout the network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._fileio import atomic_write_text
from .config import LabelSpaces, ModelConfig, dimensions_fingerprint

PROB_SUM_TOL = 1e-9

DATASET_MAGIC = "MPDS1"


class DataError(ValueError):
    """Malformed, mismatched, or invalid scene data."""


def softmax(scores) -> np.ndarray:
    """Numerically stable softmax of a 1-d score vector.

    Subtracts the max before exponentiating, so any finite input is safe.
    """
    v = np.asarray(scores, dtype=np.float64)
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def masked_row_softmax(rows: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax over active rows; masked rows stay exactly zero."""
    out = np.zeros_like(rows)
    if rows.shape[1] == 0 or not mask.any():
        return out
    sub = rows[mask]
    sub = sub - sub.max(axis=1, keepdims=True)
    np.exp(sub, out=sub)
    sub /= sub.sum(axis=1, keepdims=True)
    out[mask] = sub
    return out


@dataclass(eq=False)
class SceneInstance:
    """Unary scores, person mask, and optional ground truth for one frame.

    Label value -1 means "unknown".  Rows of masked-out (dummy) person
    slots are all-zero by invariant.
    """

    scene_unary: np.ndarray  # (G,)
    action_unary: np.ndarray  # (M, H)
    pose_unary: np.ndarray  # (M, Z); second axis empty when poses disabled
    person_mask: np.ndarray  # (M,) bool
    truth_scene: int = -1
    truth_actions: np.ndarray = field(default=None)  # (M,) int, -1 unknown
    truth_poses: np.ndarray = field(default=None)  # (M,) int, -1 unknown

    def __post_init__(self):
        self.scene_unary = np.asarray(self.scene_unary, dtype=np.float64)
        self.action_unary = np.asarray(self.action_unary, dtype=np.float64)
        self.pose_unary = np.asarray(self.pose_unary, dtype=np.float64)
        self.person_mask = np.asarray(self.person_mask, dtype=bool)
        m = self.person_mask.shape[0]
        if self.truth_actions is None:
            self.truth_actions = np.full(m, -1, dtype=np.int64)
        else:
            self.truth_actions = np.asarray(self.truth_actions, dtype=np.int64)
        if self.truth_poses is None:
            self.truth_poses = np.full(m, -1, dtype=np.int64)
        else:
            self.truth_poses = np.asarray(self.truth_poses, dtype=np.int64)

    @property
    def num_slots(self) -> int:
        return self.person_mask.shape[0]

    @property
    def num_active(self) -> int:
        return int(self.person_mask.sum())


def instances_equal(a: SceneInstance, b: SceneInstance) -> bool:
    """Bitwise equality on all scores, masks, and labels."""
    return (
        np.array_equal(a.scene_unary, b.scene_unary)
        and np.array_equal(a.action_unary, b.action_unary)
        and np.array_equal(a.pose_unary, b.pose_unary)
        and np.array_equal(a.person_mask, b.person_mask)
        and a.truth_scene == b.truth_scene
        and np.array_equal(a.truth_actions, b.truth_actions)
        and np.array_equal(a.truth_poses, b.truth_poses)
    )


def _check_prob_row(row: np.ndarray, what: str) -> None:
    if row.size == 0:
        return
    if (row < 0).any() or (row > 1).any():
        raise DataError(f"{what}: entries outside [0, 1]")
    total = float(row.sum())
    if abs(total - 1.0) > PROB_SUM_TOL:
        raise DataError(f"{what}: sums to {total!r}, expected 1 +- {PROB_SUM_TOL}")


def validate_instance(inst: SceneInstance, cfg: ModelConfig) -> SceneInstance:
    """Check dimensions and the probability/zero-row invariants."""
    ls = cfg.label_spaces
    if inst.scene_unary.shape != (ls.num_scenes,):
        raise DataError(
            f"scene_unary has shape {inst.scene_unary.shape}, "
            f"config expects ({ls.num_scenes},)"
        )
    expect_a = (cfg.max_persons, ls.num_actions)
    if inst.action_unary.shape != expect_a:
        raise DataError(f"action_unary has shape {inst.action_unary.shape}, expected {expect_a}")
    expect_r = (cfg.max_persons, ls.num_poses)
    if inst.pose_unary.shape != expect_r:
        raise DataError(f"pose_unary has shape {inst.pose_unary.shape}, expected {expect_r}")
    if inst.person_mask.shape != (cfg.max_persons,):
        raise DataError("person_mask length does not match max_persons")
    _check_prob_row(inst.scene_unary, "scene_unary")
    for m in range(cfg.max_persons):
        if inst.person_mask[m]:
            _check_prob_row(inst.action_unary[m], f"action_unary[{m}]")
            _check_prob_row(inst.pose_unary[m], f"pose_unary[{m}]")
        else:
            if inst.action_unary[m].any() or inst.pose_unary[m].any():
                raise DataError(f"masked person {m} has non-zero score rows")
    return inst


def pad_instance(inst: SceneInstance, cfg: ModelConfig) -> SceneInstance:
    """Grow an instance with M person rows to max_persons dummy-padded rows.

    Real rows are copied bit-identically; padding rows are all-zero with the
    mask off and labels -1.  M > max_persons is an error.
    """
    m = inst.num_slots
    m_max = cfg.max_persons
    if m > m_max:
        raise DataError(f"too many persons for configured M_max: instance has {m}, max_persons={m_max}")
    if m == m_max:
        return inst
    pad = m_max - m
    return SceneInstance(
        scene_unary=inst.scene_unary.copy(),
        action_unary=np.vstack([inst.action_unary, np.zeros((pad, inst.action_unary.shape[1]))]),
        pose_unary=np.vstack([inst.pose_unary, np.zeros((pad, inst.pose_unary.shape[1]))]),
        person_mask=np.concatenate([inst.person_mask, np.zeros(pad, dtype=bool)]),
        truth_scene=inst.truth_scene,
        truth_actions=np.concatenate([inst.truth_actions, np.full(pad, -1, dtype=np.int64)]),
        truth_poses=np.concatenate([inst.truth_poses, np.full(pad, -1, dtype=np.int64)]),
    )


@dataclass(eq=False)
class Dataset:
    """An ordered collection of instances sharing one set of dimensions."""

    fingerprint: str
    instances: list

    def __len__(self) -> int:
        return len(self.instances)


def make_dataset(instances, cfg: ModelConfig) -> Dataset:
    for i, inst in enumerate(instances):
        try:
            validate_instance(inst, cfg)
        except DataError as exc:
            raise DataError(f"instance {i}: {exc}") from None
    return Dataset(fingerprint=dimensions_fingerprint(cfg), instances=list(instances))


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    return (
        a.fingerprint == b.fingerprint
        and len(a) == len(b)
        and all(instances_equal(x, y) for x, y in zip(a.instances, b.instances))
    )


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Knobs of the synthetic stand-in for upstream per-frame classifiers.

    scene_action_table[g] is the categorical distribution actions are drawn
    from in scenes labeled g; pose_coherence[g] is the probability that all
    persons in such a scene share a single pose.  dependency_strength scales
    the true-label logit before noise, so 0 yields pure noise and 1 the
    cleanest scores this generator produces.
    """

    num_instances: int
    persons_range: tuple[int, int]
    noise_sigma: float
    dependency_strength: float
    scene_action_table: np.ndarray  # (G, H) rows normalized
    pose_coherence: np.ndarray  # (G,) probabilities

    def __post_init__(self):
        self.scene_action_table = np.asarray(self.scene_action_table, dtype=np.float64)
        self.pose_coherence = np.asarray(self.pose_coherence, dtype=np.float64)


def validate_synth_spec(spec: SynthSpec, cfg: ModelConfig) -> SynthSpec:
    ls = cfg.label_spaces
    if spec.num_instances < 0:
        raise DataError("num_instances must be >= 0")
    lo, hi = spec.persons_range
    if lo < 0 or hi < lo:
        raise DataError(f"invalid persons_range {spec.persons_range}")
    if hi > cfg.max_persons:
        raise DataError(
            f"persons_range max {hi} exceeds configured max_persons {cfg.max_persons}"
        )
    if spec.noise_sigma < 0:
        raise DataError("noise_sigma must be >= 0")
    if not 0.0 <= spec.dependency_strength <= 1.0:
        raise DataError("dependency_strength must be in [0, 1]")
    if spec.scene_action_table.shape != (ls.num_scenes, ls.num_actions):
        raise DataError(
            f"scene_action_table shape {spec.scene_action_table.shape} does not match "
            f"({ls.num_scenes}, {ls.num_actions})"
        )
    if (spec.scene_action_table < 0).any():
        raise DataError("scene_action_table has negative entries")
    sums = spec.scene_action_table.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-9):
        raise DataError("scene_action_table rows must sum to 1")
    if spec.pose_coherence.shape != (ls.num_scenes,):
        raise DataError("pose_coherence must have one entry per scene")
    if (spec.pose_coherence < 0).any() or (spec.pose_coherence > 1).any():
        raise DataError("pose_coherence entries must be probabilities")
    return spec


def _noisy_onehot(label: int, size: int, strength: float, sigma: float, rng) -> np.ndarray:
    logits = np.zeros(size)
    logits[label] = strength
    if sigma > 0:
        logits = logits + rng.normal(0.0, sigma, size)
    return softmax(logits)


def generate_synthetic(spec: SynthSpec, cfg: ModelConfig, seed: int) -> Dataset:
    """Sample a labeled dataset with scene->action and pose-coherence structure.

    Deterministic for a fixed (spec, cfg, seed) triple: all draws come from
    a single generator in a fixed order.
    """
    validate_synth_spec(spec, cfg)
    ls = cfg.label_spaces
    rng = np.random.default_rng(seed)
    lo, hi = spec.persons_range
    instances = []
    for _ in range(spec.num_instances):
        n_persons = int(rng.integers(lo, hi + 1))
        scene = int(rng.integers(ls.num_scenes))
        actions = [
            int(rng.choice(ls.num_actions, p=spec.scene_action_table[scene]))
            for _ in range(n_persons)
        ]
        if ls.poses_enabled:
            coherent = bool(rng.random() < spec.pose_coherence[scene])
            if coherent:
                shared = int(rng.integers(ls.num_poses))
                poses = [shared] * n_persons
            else:
                poses = [int(rng.integers(ls.num_poses)) for _ in range(n_persons)]
        else:
            poses = [-1] * n_persons

        scene_unary = _noisy_onehot(
            scene, ls.num_scenes, spec.dependency_strength, spec.noise_sigma, rng
        )
        action_unary = np.zeros((n_persons, ls.num_actions))
        pose_unary = np.zeros((n_persons, ls.num_poses))
        for m in range(n_persons):
            action_unary[m] = _noisy_onehot(
                actions[m], ls.num_actions, spec.dependency_strength, spec.noise_sigma, rng
            )
            if ls.poses_enabled:
                pose_unary[m] = _noisy_onehot(
                    poses[m], ls.num_poses, spec.dependency_strength, spec.noise_sigma, rng
                )
        inst = SceneInstance(
            scene_unary=scene_unary,
            action_unary=action_unary,
            pose_unary=pose_unary,
            person_mask=np.ones(n_persons, dtype=bool),
            truth_scene=scene,
            truth_actions=np.asarray(actions, dtype=np.int64),
            truth_poses=np.asarray(poses, dtype=np.int64),
        )
        instances.append(pad_instance(inst, cfg))
    return make_dataset(instances, cfg)


# ---------------------------------------------------------------------------
# Dataset file format (line-oriented UTF-8 text)
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    # repr gives the shortest decimal string that round-trips the exact
    # float64 value, keeping the file both diffable and lossless.
    return repr(float(x))


def serialize_dataset(ds: Dataset) -> str:
    if not ds.instances:
        raise DataError("cannot infer dimensions from an empty dataset; use serialize_dataset_dims")
    first = ds.instances[0]
    return serialize_dataset_dims(
        ds,
        num_scenes=first.scene_unary.shape[0],
        num_actions=first.action_unary.shape[1],
        num_poses=first.pose_unary.shape[1],
        max_persons=first.num_slots,
    )


def serialize_dataset_dims(ds: Dataset, num_scenes, num_actions, num_poses, max_persons) -> str:
    lines = [
        f"{DATASET_MAGIC} G={num_scenes} H={num_actions} Z={num_poses} "
        f"M={max_persons} N={len(ds.instances)}"
    ]
    for inst in ds.instances:
        lines.append(f"I {inst.truth_scene}")
        lines.append("S " + " ".join(_fmt(x) for x in inst.scene_unary))
        for m in range(max_persons):
            lines.append(
                f"P {m} {int(inst.person_mask[m])} "
                f"{int(inst.truth_actions[m])} {int(inst.truth_poses[m])}"
            )
            lines.append("A " + " ".join(_fmt(x) for x in inst.action_unary[m]))
            if num_poses > 0:
                lines.append("R " + " ".join(_fmt(x) for x in inst.pose_unary[m]))
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path, cfg: ModelConfig | None = None) -> None:
    if cfg is not None:
        text = serialize_dataset_dims(
            ds, cfg.num_scenes, cfg.num_actions, cfg.num_poses, cfg.max_persons
        )
    else:
        text = serialize_dataset(ds)
    atomic_write_text(path, text)


class _LineReader:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self, record: int, expect: str) -> list[str]:
        if self.pos >= len(self.lines):
            raise DataError(f"instance {record}: unexpected end of file, expected {expect!r} line")
        line = self.lines[self.pos]
        self.pos += 1
        parts = line.split()
        if not parts or parts[0] != expect:
            raise DataError(f"instance {record}: expected {expect!r} line, got {line!r}")
        return parts

    def exhausted(self) -> bool:
        return self.pos >= len(self.lines)


def _floats(parts: list[str], count: int, record: int, what: str) -> np.ndarray:
    values = parts[1:]
    if len(values) != count:
        raise DataError(f"instance {record}: {what} has {len(values)} values, expected {count}")
    try:
        return np.array([float(v) for v in values], dtype=np.float64)
    except ValueError:
        raise DataError(f"instance {record}: {what} contains a non-numeric value") from None


def parse_dataset_text(text: str, cfg: ModelConfig | None = None) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise DataError("empty file: missing dataset header")
    header = lines[0].split()
    if len(header) != 6 or header[0] != DATASET_MAGIC:
        raise DataError(f"bad dataset header: {lines[0]!r}")
    try:
        dims = {p.split("=")[0]: int(p.split("=")[1]) for p in header[1:]}
        num_g, num_h, num_z = dims["G"], dims["H"], dims["Z"]
        num_m, count = dims["M"], dims["N"]
    except (KeyError, IndexError, ValueError):
        raise DataError(f"bad dataset header: {lines[0]!r}") from None

    if cfg is not None:
        pairs = (
            ("num_scenes", num_g, cfg.num_scenes),
            ("num_actions", num_h, cfg.num_actions),
            ("num_poses", num_z, cfg.num_poses),
            ("max_persons", num_m, cfg.max_persons),
        )
        for name, got, want in pairs:
            if got != want:
                raise DataError(f"dataset {name}={got} does not match config {name}={want}")

    reader = _LineReader("\n".join(lines[1:]))
    instances = []
    for i in range(count):
        parts = reader.next(i, "I")
        if len(parts) != 2:
            raise DataError(f"instance {i}: malformed I line")
        try:
            truth_scene = int(parts[1])
        except ValueError:
            raise DataError(f"instance {i}: non-integer scene label") from None
        scene_unary = _floats(reader.next(i, "S"), num_g, i, "S line")
        action_unary = np.zeros((num_m, num_h))
        pose_unary = np.zeros((num_m, num_z))
        mask = np.zeros(num_m, dtype=bool)
        truth_actions = np.full(num_m, -1, dtype=np.int64)
        truth_poses = np.full(num_m, -1, dtype=np.int64)
        for m in range(num_m):
            p = reader.next(i, "P")
            if len(p) != 5:
                raise DataError(f"instance {i}: malformed P line for person {m}")
            try:
                slot, active, ta, tp = int(p[1]), int(p[2]), int(p[3]), int(p[4])
            except ValueError:
                raise DataError(f"instance {i}: non-integer field in P line") from None
            if slot != m:
                raise DataError(f"instance {i}: person lines out of order ({slot} != {m})")
            if active not in (0, 1):
                raise DataError(f"instance {i}: mask flag must be 0 or 1")
            mask[m] = bool(active)
            truth_actions[m], truth_poses[m] = ta, tp
            action_unary[m] = _floats(reader.next(i, "A"), num_h, i, f"A line of person {m}")
            if num_z > 0:
                pose_unary[m] = _floats(reader.next(i, "R"), num_z, i, f"R line of person {m}")
        instances.append(
            SceneInstance(
                scene_unary=scene_unary,
                action_unary=action_unary,
                pose_unary=pose_unary,
                person_mask=mask,
                truth_scene=truth_scene,
                truth_actions=truth_actions,
                truth_poses=truth_poses,
            )
        )
    if not reader.exhausted():
        extra = reader.lines[reader.pos]
        raise DataError(f"trailing content after {count} instances: {extra!r}")

    # validate against the header's own dimensions, not the caller's config
    header_cfg = ModelConfig(
        label_spaces=LabelSpaces(num_g, num_h, num_z),
        max_persons=num_m,
        latent_factors_per_scene=1,
    )
    for i, inst in enumerate(instances):
        try:
            validate_instance(inst, header_cfg)
        except DataError as exc:
            raise DataError(f"instance {i}: {exc}") from None
    return Dataset(fingerprint=dimensions_fingerprint(header_cfg), instances=instances)


def load_dataset(path, cfg: ModelConfig | None = None) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_dataset_text(fh.read(), cfg)
