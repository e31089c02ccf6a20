import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from narcp import sim
from narcp.sim import ActionError, ConfigError, ScenarioConfig, TargetStrategy

HOLD_BOTH = "hold heading and hold speed"


def still_target(**kw):
    base = dict(pursuer_pos=(0.0, 0.0), pursuer_heading=0.0, pursuer_speed=2.0,
                target_pos=(5.0, 0.0), target_heading=0.0, target_speed=0.0,
                step_index=0, d_star=5.0)
    base.update(kw)
    return sim.SimState(**base)


class TestReset:
    def test_deterministic(self):
        cfg = ScenarioConfig(seed=7)
        assert sim.reset(cfg) == sim.reset(cfg)

    def test_seeds_differ(self):
        a = sim.reset(ScenarioConfig(seed=7))
        b = sim.reset(ScenarioConfig(seed=8))
        assert a.target_pos != b.target_pos

    @pytest.mark.parametrize("seed", range(50))
    def test_spawn_distance(self, seed):
        s = sim.reset(ScenarioConfig(target_distance_d_star=5.0, seed=seed))
        assert 4.0 <= sim.geometry(s).distance <= 6.0

    def test_randomized_distance_range(self, rng):
        b = sim.spawn(ScenarioConfig(randomize_distance=True), rng, 2000)
        assert b.d_star.min() >= 3.0 and b.d_star.max() <= 12.0

    def test_circular_target_speed(self):
        cfg = ScenarioConfig(target_strategy=TargetStrategy("circular", 10.0, 0.3))
        assert sim.reset(cfg).target_speed == pytest.approx(3.0)


class TestStep:
    def test_turn_left_rate(self):
        cfg = ScenarioConfig(task="direction")
        s = still_target(pursuer_heading=0.3)
        s1 = sim.step(s, "turn hard left", cfg)
        assert s1.pursuer_heading - 0.3 == pytest.approx(0.052, abs=1e-15)
        assert s1.step_index == 1

    def test_hold_dead_ahead_distance_change(self):
        cfg = ScenarioConfig(task="integrated")
        s = still_target()
        s1 = sim.step(s, HOLD_BOTH, cfg)
        change = sim.geometry(s1).distance - sim.geometry(s).distance
        assert change == pytest.approx(-2.0 * 0.1, abs=1e-9)

    @given(st.floats(-math.pi, math.pi), st.floats(1.0, 20.0), st.floats(0.0, 8.0))
    @settings(max_examples=200, deadline=None)
    def test_hold_distance_change_general(self, bearing, d, v):
        # exact law of cosines; the first-order term is -v*dt*cos(bearing error)
        cfg = ScenarioConfig(task="integrated")
        s = still_target(target_pos=(d * math.cos(bearing), d * math.sin(bearing)), pursuer_speed=v)
        s1 = sim.step(s, HOLD_BOTH, cfg)
        g0 = sim.geometry(s)
        step_len = v * 0.1
        exact = math.sqrt(d * d - 2 * d * step_len * math.cos(g0.bearing) + step_len ** 2) - d
        assert sim.geometry(s1).distance - d == pytest.approx(exact, abs=1e-9)
        assert abs(exact + step_len * math.cos(g0.bearing)) <= step_len ** 2 / d + 1e-12

    def test_circular_heading_advance(self):
        cfg = ScenarioConfig(task="direction", target_strategy=TargetStrategy("circular", 10.0, 0.3))
        s = still_target(target_heading=0.4, target_speed=3.0)
        s0 = s
        for _ in range(100):
            s = sim.step(s, "hold heading", cfg)
        adv = (s.target_heading - s0.target_heading) % (2 * math.pi)
        assert adv == pytest.approx(3.0, abs=1e-9)

    def test_straight_target_keeps_heading(self):
        cfg = ScenarioConfig(task="direction")
        s = still_target(target_speed=3.0, target_heading=1.0)
        s1 = sim.step(s, "hold heading", cfg)
        assert s1.target_heading == 1.0
        assert s1.target_pos[0] - 5.0 == pytest.approx(0.3 * math.cos(1.0))

    def test_speed_clamped(self):
        cfg = ScenarioConfig(task="distance", v_max=2.0)
        s = sim.step(still_target(pursuer_speed=2.0), "speed up", cfg)
        assert s.pursuer_speed == 2.0

    def test_distance_task_points_at_target(self):
        cfg = ScenarioConfig(task="distance")
        s = still_target(target_pos=(0.0, 5.0))
        s1 = sim.step(s, "hold speed", cfg)
        assert s1.pursuer_heading == pytest.approx(math.pi / 2)

    @pytest.mark.parametrize("bad", ["bank left", 7, -1, 2.0, True])
    def test_bad_actions(self, bad):
        with pytest.raises(ActionError):
            sim.step(still_target(), bad, ScenarioConfig(task="direction"))


class TestPeek:
    def test_peek_equals_step(self, rng):
        cfg = ScenarioConfig(task="integrated", target_strategy=TargetStrategy("circular"))
        s = sim.reset(cfg)
        for a in sim.action_space("integrated"):
            assert sim.peek(s, a, cfg) == sim.step(s, a, cfg)
            assert sim.peek(s, a, cfg) == sim.peek(s, a, cfg)

    def test_peeking_does_not_perturb(self):
        cfg = ScenarioConfig(task="direction", seed=3)
        a, b = sim.reset(cfg), sim.reset(cfg)
        for t in range(30):
            for act in sim.action_space("direction"):
                sim.peek(a, act, cfg)
            a = sim.step(a, t % 5, cfg)
            b = sim.step(b, t % 5, cfg)
        assert a == b

    def test_batch_peek_matches_step(self, rng):
        cfg = ScenarioConfig(task="integrated")
        b = sim.spawn(cfg, rng, 7)
        allnext = sim.batch_peek_all(b, cfg)
        for a in range(15):
            one = sim.batch_step(b, np.full(7, a), cfg)
            assert np.array_equal(one.px, allnext.px[:, a])
            assert np.array_equal(one.heading, allnext.heading[:, a])


class TestGeometry:
    def test_aligned(self):
        assert sim.geometry(still_target()).e_dir == 0.0

    def test_opposite(self):
        assert sim.geometry(still_target(pursuer_heading=math.pi)).e_dir == pytest.approx(2.0, abs=1e-15)

    def test_right_angle(self):
        assert sim.geometry(still_target(pursuer_heading=math.pi / 2)).e_dir == pytest.approx(math.sqrt(2))

    def test_degenerate(self):
        g = sim.geometry(still_target(target_pos=(0.0, 0.0)))
        assert g.degenerate and g.e_dir == 0.0 and g.distance == 0.0

    def test_closing_speed(self):
        g = sim.geometry(still_target(pursuer_speed=2.0))
        assert g.closing_speed == pytest.approx(2.0)


class TestConfig:
    def test_round_trip(self):
        cfg = ScenarioConfig(task="integrated", randomize_distance=True,
                             target_strategy=TargetStrategy("circular", 8.0, -0.2), nuisance_color="red")
        assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("data,field", [
        ({"task": "hover"}, "task"),
        ({"dt": 0}, "dt"),
        ({"target_distance_d_star": -1}, "target_distance_d_star"),
        ({"surprise": 1}, "surprise"),
        ({"target_strategy": {"kind": "zigzag"}}, "target_strategy.kind"),
        ({"episode_length": 0}, "episode_length"),
        ({"nuisance_color": "mauve"}, "nuisance_color"),
    ])
    def test_rejects(self, data, field):
        with pytest.raises(ConfigError) as info:
            ScenarioConfig.from_dict(data)
        assert info.value.field == field

    def test_action_spaces(self):
        assert len(sim.action_space("direction")) == 5
        assert len(sim.action_space("distance")) == 3
        space = sim.action_space("integrated")
        assert len(space) == 15 and space[0] == "turn hard left and speed up"
