import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mprefine as mp
from mprefine.config import (
    config_lines,
    first_pass_edges,
    parse_config_text,
    second_pass_edges,
)


def make_cfg(num_scenes=5, num_actions=5, num_poses=8, max_persons=12, latent=10, steps=2, **kw):
    return mp.ModelConfig(
        label_spaces=mp.LabelSpaces(num_scenes, num_actions, num_poses),
        max_persons=max_persons,
        latent_factors_per_scene=latent,
        num_steps=steps,
        **kw,
    )


class TestValidateConfig:
    def test_collective_activity_shape_is_valid(self):
        cfg = make_cfg(5, 5, 8, 12, latent=10, steps=2)
        assert mp.validate_config(cfg) is cfg

    def test_arity2_variant_is_valid(self):
        cfg = make_cfg(2, 6, 0, 8, latent=0, steps=2)
        assert mp.validate_config(cfg) is cfg
        topo = mp.build_topology(cfg)
        assert topo.psi_factor_count == 0

    def test_single_scene_rejected(self):
        with pytest.raises(mp.ConfigError, match="num_scenes"):
            mp.validate_config(make_cfg(num_scenes=1))

    def test_latent_required_with_poses(self):
        with pytest.raises(mp.ConfigError, match="latent_T"):
            mp.validate_config(make_cfg(latent=0))

    def test_zero_latent_fine_without_poses(self):
        mp.validate_config(make_cfg(num_poses=0, latent=0))

    @pytest.mark.parametrize(
        "kw,pattern",
        [
            (dict(num_actions=0), "num_actions"),
            (dict(max_persons=0), "max_persons"),
            (dict(steps=0), "num_steps"),
            (dict(factor_activation="relu"), "activation"),
            (dict(learning_rate=0.0), "learning_rate"),
            (dict(phase_epochs=(-1, 2)), "epochs"),
        ],
    )
    def test_each_invariant_named(self, kw, pattern):
        with pytest.raises(mp.ConfigError, match=pattern):
            mp.validate_config(make_cfg(**kw))


class TestTopology:
    def test_factor_counts(self):
        topo = mp.build_topology(make_cfg(2, 2, 2, 2, latent=3))
        assert topo.phi_factor_count == 2 * 2 * 2 * 2
        assert topo.psi_factor_count == 3 * 2

    def test_factor_counts_without_poses(self):
        topo = mp.build_topology(make_cfg(2, 2, 0, 1, latent=0))
        assert topo.phi_factor_count == 4
        assert topo.psi_factor_count == 0

    def test_scene_fan_in(self):
        topo = mp.build_topology(make_cfg(2, 2, 2, 2, latent=3))
        for g in (0, 1):
            assert len(topo.scene_phi[g]) == 2 * 2 * 2  # H * Z * M_max
            assert len(topo.scene_psi[g]) == 3

    def test_action_and_pose_fan_in(self):
        cfg = make_cfg(3, 2, 4, 2, latent=2)
        topo = mp.build_topology(cfg)
        assert len(topo.action_phi[(0, 1)]) == 3 * 4  # over all g, z
        assert len(topo.pose_phi[(1, 0)]) == 3 * 2  # over all g, h
        assert len(topo.pose_psi[(1, 0)]) == 2 * 3  # every (t, g)

    small_dims = st.tuples(
        st.integers(2, 3),  # scenes
        st.integers(1, 3),  # actions
        st.integers(0, 3),  # poses
        st.integers(1, 3),  # persons
        st.integers(1, 3),  # latent factors
    )

    @given(small_dims)
    @settings(max_examples=40, deadline=None)
    def test_counting_identities(self, dims):
        num_g, num_h, num_z, num_m, num_t = dims
        cfg = make_cfg(num_g, num_h, num_z, num_m, latent=num_t)
        topo = mp.build_topology(cfg)
        if num_z > 0:
            assert topo.phi_factor_count == num_g * num_h * num_z * num_m
            assert topo.psi_factor_count == num_t * num_g
        else:
            assert topo.phi_factor_count == num_g * num_h * num_m
            assert topo.psi_factor_count == 0

    @given(small_dims)
    @settings(max_examples=40, deadline=None)
    def test_second_pass_reverses_first_pass(self, dims):
        # every first-pass (factor, variable) edge appears exactly once
        # across the second-pass connection sets, and nothing else does
        num_g, num_h, num_z, num_m, num_t = dims
        cfg = make_cfg(num_g, num_h, num_z, num_m, latent=num_t)
        topo = mp.build_topology(cfg)
        first = sorted(first_pass_edges(cfg))
        second = sorted(second_pass_edges(topo))
        assert len(set(second)) == len(second)
        assert first == second


class TestConfigFile:
    def test_parse_full_file(self):
        text = """
        # sample configuration
        num_scenes=5
        num_actions=5
        num_poses=8   # orientation-style labels
        max_persons=12
        latent_T=10
        num_steps=2
        activation=tanh
        tie_psi_positions=0
        learning_rate=0.1
        epochs_phase_a=3
        epochs_phase_b=2
        seed=42
        """
        cfg = parse_config_text(text)
        assert cfg.num_scenes == 5
        assert cfg.num_poses == 8
        assert cfg.latent_factors_per_scene == 10
        assert cfg.phase_epochs == (3, 2)
        assert cfg.rng_seed == 42

    def test_round_trip_through_lines(self):
        cfg = make_cfg(3, 4, 2, 5, latent=7, steps=3, tie_psi_positions=True,
                       learning_rate=0.25, phase_epochs=(4, 1), rng_seed=9)
        again = parse_config_text("\n".join(config_lines(cfg)))
        assert again == cfg

    def test_missing_latent_with_poses_errors(self):
        text = "num_scenes=3\nnum_actions=2\nnum_poses=4\nmax_persons=2\n"
        with pytest.raises(mp.ConfigError, match="latent_T"):
            parse_config_text(text)

    def test_unknown_key_rejected(self):
        with pytest.raises(mp.ConfigError, match="unknown key"):
            parse_config_text("num_scenes=2\nnum_actions=1\nnum_poses=0\nmax_persons=1\nfoo=1")

    def test_missing_required_key(self):
        with pytest.raises(mp.ConfigError, match="max_persons"):
            parse_config_text("num_scenes=2\nnum_actions=1\nnum_poses=0")

    def test_duplicate_key_rejected(self):
        with pytest.raises(mp.ConfigError, match="duplicate"):
            parse_config_text(
                "num_scenes=2\nnum_scenes=3\nnum_actions=1\nnum_poses=0\nmax_persons=1"
            )
