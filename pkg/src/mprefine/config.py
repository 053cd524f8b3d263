"""Label spaces, hyperparameters, and the factor-graph topology they induce.

The refinement network is fully determined by a handful of cardinalities:
the number of scene labels, per-person action labels, optional per-person
pose labels, a fixed person capacity, and the number of latent pose-summary
factors per scene.  ``build_topology`` materializes which factor neurons
exist and what each one connects to, in both passing directions.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator

ACTIVATIONS = ("tanh", "linear")

# Exact key set of the flat key=value config file format.
CONFIG_KEYS = (
    "num_scenes",
    "num_actions",
    "num_poses",
    "max_persons",
    "latent_T",
    "num_steps",
    "activation",
    "tie_psi_positions",
    "learning_rate",
    "epochs_phase_a",
    "epochs_phase_b",
    "seed",
)

_REQUIRED_KEYS = ("num_scenes", "num_actions", "num_poses", "max_persons")


class ConfigError(ValueError):
    """A configuration value violates a structural invariant."""


@dataclass(frozen=True)
class LabelSpaces:
    """Cardinalities of the scene, action, and pose label sets.

    ``num_poses == 0`` disables the pose chain entirely (the arity-2
    variant): no pose scores, no pose-summary factors.
    """

    num_scenes: int
    num_actions: int
    num_poses: int = 0

    @property
    def poses_enabled(self) -> bool:
        return self.num_poses > 0


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to build and train a refinement network."""

    label_spaces: LabelSpaces
    max_persons: int
    latent_factors_per_scene: int = 10
    num_steps: int = 2
    factor_activation: str = "tanh"
    tie_psi_positions: bool = False
    learning_rate: float = 0.1
    phase_epochs: tuple[int, int] = (3, 2)
    rng_seed: int = 0

    @property
    def num_scenes(self) -> int:
        return self.label_spaces.num_scenes

    @property
    def num_actions(self) -> int:
        return self.label_spaces.num_actions

    @property
    def num_poses(self) -> int:
        return self.label_spaces.num_poses

    @property
    def poses_enabled(self) -> bool:
        return self.label_spaces.poses_enabled


def validate_config(cfg: ModelConfig) -> ModelConfig:
    """Return ``cfg`` unchanged iff every invariant holds.

    Raises ConfigError naming the first violated invariant.
    """
    ls = cfg.label_spaces
    if ls.num_scenes < 2:
        raise ConfigError(f"num_scenes >= 2 violated (got {ls.num_scenes})")
    if ls.num_actions < 1:
        raise ConfigError(f"num_actions >= 1 violated (got {ls.num_actions})")
    if ls.num_poses < 0:
        raise ConfigError(f"num_poses >= 0 violated (got {ls.num_poses})")
    if cfg.max_persons < 1:
        raise ConfigError(f"max_persons >= 1 violated (got {cfg.max_persons})")
    if cfg.num_steps < 1:
        raise ConfigError(f"num_steps >= 1 violated (got {cfg.num_steps})")
    if ls.poses_enabled and cfg.latent_factors_per_scene < 1:
        raise ConfigError(
            "latent_T >= 1 required when poses enabled "
            f"(got latent_T={cfg.latent_factors_per_scene}, num_poses={ls.num_poses})"
        )
    if cfg.factor_activation not in ACTIVATIONS:
        raise ConfigError(
            f"activation must be one of {ACTIVATIONS} (got {cfg.factor_activation!r})"
        )
    if not cfg.learning_rate > 0:
        raise ConfigError(f"learning_rate > 0 violated (got {cfg.learning_rate})")
    ea, eb = cfg.phase_epochs
    if ea < 0 or eb < 0:
        raise ConfigError(f"phase epochs must be >= 0 (got {cfg.phase_epochs})")
    return cfg


def dimensions_fingerprint(cfg: ModelConfig) -> str:
    """Short hash of the label-space dimensions and person capacity.

    Embedded in dataset and model files so commands can refuse mismatched
    inputs before doing any work.
    """
    ls = cfg.label_spaces
    key = f"G={ls.num_scenes} H={ls.num_actions} Z={ls.num_poses} M={cfg.max_persons}"
    return hashlib.sha256(key.encode("ascii")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

# Factor identifiers: ("phi", m, g, h, z)  (("phi", m, g, h) without poses)
#                     ("psi", t, g)
# Variable identifiers: ("scene", g), ("action", m, h), ("pose", m, z)


@dataclass(frozen=True)
class Topology:
    """Materialized connection structure of one message-passing step.

    The second-pass sets map each output node to the factor neurons feeding
    it; they are exactly the reverse of the first-pass (input-to-factor)
    edges.  Immutable after construction; safe to share across workers.
    """

    phi_factor_count: int
    psi_factor_count: int
    scene_phi: dict  # g -> list of phi factor ids
    scene_psi: dict  # g -> list of psi factor ids
    action_phi: dict  # (m, h) -> list of phi factor ids
    pose_phi: dict  # (m, z) -> list of phi factor ids
    pose_psi: dict  # (m, z) -> list of psi factor ids


def build_topology(cfg: ModelConfig) -> Topology:
    """Enumerate every factor neuron and its connections for ``cfg``."""
    validate_config(cfg)
    ls = cfg.label_spaces
    num_g, num_h, num_z = ls.num_scenes, ls.num_actions, ls.num_poses
    num_m, num_t = cfg.max_persons, cfg.latent_factors_per_scene

    scene_phi: dict = {g: [] for g in range(num_g)}
    action_phi: dict = {(m, h): [] for m in range(num_m) for h in range(num_h)}
    if ls.poses_enabled:
        scene_psi = {g: [("psi", t, g) for t in range(num_t)] for g in range(num_g)}
        pose_phi: dict = {(m, z): [] for m in range(num_m) for z in range(num_z)}
        pose_psi = {
            (m, z): [("psi", t, g) for t in range(num_t) for g in range(num_g)]
            for m in range(num_m)
            for z in range(num_z)
        }
        phi_count = 0
        for m in range(num_m):
            for g in range(num_g):
                for h in range(num_h):
                    for z in range(num_z):
                        fid = ("phi", m, g, h, z)
                        scene_phi[g].append(fid)
                        action_phi[(m, h)].append(fid)
                        pose_phi[(m, z)].append(fid)
                        phi_count += 1
        psi_count = num_t * num_g
    else:
        scene_psi = {g: [] for g in range(num_g)}
        pose_phi = {}
        pose_psi = {}
        phi_count = 0
        for m in range(num_m):
            for g in range(num_g):
                for h in range(num_h):
                    fid = ("phi", m, g, h)
                    scene_phi[g].append(fid)
                    action_phi[(m, h)].append(fid)
                    phi_count += 1
        psi_count = 0

    return Topology(
        phi_factor_count=phi_count,
        psi_factor_count=psi_count,
        scene_phi=scene_phi,
        scene_psi=scene_psi,
        action_phi=action_phi,
        pose_phi=pose_phi,
        pose_psi=pose_psi,
    )


def first_pass_edges(cfg: ModelConfig) -> Iterator[tuple]:
    """Yield every (factor, variable) edge of the input-to-factor pass.

    Derived from what each factor reads, independently of the second-pass
    sets stored on Topology, so the reversibility property can be tested
    against an enumeration that shares no code with build_topology.
    """
    ls = cfg.label_spaces
    num_g, num_h, num_z = ls.num_scenes, ls.num_actions, ls.num_poses
    num_m, num_t = cfg.max_persons, cfg.latent_factors_per_scene
    if ls.poses_enabled:
        for m in range(num_m):
            for g in range(num_g):
                for h in range(num_h):
                    for z in range(num_z):
                        fid = ("phi", m, g, h, z)
                        yield fid, ("scene", g)
                        yield fid, ("action", m, h)
                        yield fid, ("pose", m, z)
        for t in range(num_t):
            for g in range(num_g):
                fid = ("psi", t, g)
                yield fid, ("scene", g)
                for m in range(num_m):
                    for z in range(num_z):
                        yield fid, ("pose", m, z)
    else:
        for m in range(num_m):
            for g in range(num_g):
                for h in range(num_h):
                    fid = ("phi", m, g, h)
                    yield fid, ("scene", g)
                    yield fid, ("action", m, h)


def second_pass_edges(topo: Topology) -> Iterator[tuple]:
    """Yield every (factor, variable) edge of the factor-to-output pass."""
    for g, fids in topo.scene_phi.items():
        for fid in fids:
            yield fid, ("scene", g)
    for g, fids in topo.scene_psi.items():
        for fid in fids:
            yield fid, ("scene", g)
    for (m, h), fids in topo.action_phi.items():
        for fid in fids:
            yield fid, ("action", m, h)
    for (m, z), fids in topo.pose_phi.items():
        for fid in fids:
            yield fid, ("pose", m, z)
    for (m, z), fids in topo.pose_psi.items():
        for fid in fids:
            yield fid, ("pose", m, z)


# ---------------------------------------------------------------------------
# Flat key=value config file format
# ---------------------------------------------------------------------------


def _parse_bool(value: str, key: str) -> bool:
    lowered = value.lower()
    if lowered in ("1", "true"):
        return True
    if lowered in ("0", "false"):
        return False
    raise ConfigError(f"{key}: expected 0/1/true/false, got {value!r}")


def parse_config_text(text: str) -> ModelConfig:
    """Parse the flat key=value format (one key per line, # comments)."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value

    for key in _REQUIRED_KEYS:
        if key not in values:
            raise ConfigError(f"missing required key {key!r}")

    def _int(key: str, default: int | None = None) -> int:
        if key not in values:
            return default  # type: ignore[return-value]
        try:
            return int(values[key])
        except ValueError:
            raise ConfigError(f"{key}: expected integer, got {values[key]!r}") from None

    def _float(key: str, default: float) -> float:
        if key not in values:
            return default
        try:
            return float(values[key])
        except ValueError:
            raise ConfigError(f"{key}: expected number, got {values[key]!r}") from None

    cfg = ModelConfig(
        label_spaces=LabelSpaces(
            num_scenes=_int("num_scenes"),
            num_actions=_int("num_actions"),
            num_poses=_int("num_poses"),
        ),
        max_persons=_int("max_persons"),
        latent_factors_per_scene=_int("latent_T", 0),
        num_steps=_int("num_steps", 2),
        factor_activation=values.get("activation", "tanh"),
        tie_psi_positions=_parse_bool(values["tie_psi_positions"], "tie_psi_positions")
        if "tie_psi_positions" in values
        else False,
        learning_rate=_float("learning_rate", 0.1),
        phase_epochs=(_int("epochs_phase_a", 3), _int("epochs_phase_b", 2)),
        rng_seed=_int("seed", 0),
    )
    return validate_config(cfg)


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def config_lines(cfg: ModelConfig) -> list[str]:
    """Serialize ``cfg`` as the key=value lines of the config file format."""
    return [
        f"num_scenes={cfg.num_scenes}",
        f"num_actions={cfg.num_actions}",
        f"num_poses={cfg.num_poses}",
        f"max_persons={cfg.max_persons}",
        f"latent_T={cfg.latent_factors_per_scene}",
        f"num_steps={cfg.num_steps}",
        f"activation={cfg.factor_activation}",
        f"tie_psi_positions={1 if cfg.tie_psi_positions else 0}",
        f"learning_rate={cfg.learning_rate!r}",
        f"epochs_phase_a={cfg.phase_epochs[0]}",
        f"epochs_phase_b={cfg.phase_epochs[1]}",
        f"seed={cfg.rng_seed}",
    ]
