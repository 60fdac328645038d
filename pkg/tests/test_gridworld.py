from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskrl import gridworld as gw

ALL_TASKS = tuple(gw.TASKS)


def _spec(text: str, horizon: int | None = None) -> gw.EnvSpec:
    return gw.make_spec(gw.parse_layout(text, "inline"), horizon=horizon)


@pytest.fixture(scope="module")
def specs():
    return {t: gw.make_task(t) for t in ALL_TASKS}


# ---------------------------------------------------------------------------
# parsing

def test_minimal_enclosure():
    layout = gw.parse_layout("###\n#G#\n###")
    assert len(layout.positions(gw.Cell.GOAL)) == 1
    assert len(layout.positions(gw.Cell.WALL)) == 8


def test_unknown_character_reports_position():
    with pytest.raises(gw.LayoutError, match=r"line 2.*column 3"):
        gw.parse_layout("####\n#.Z#\n#G.#\n####")


@pytest.mark.parametrize("text, pattern", [
    ("####\n#.G#\n###", "ragged|width|length"),
    ("####\n#..#\n####", "[Gg]oal"),
    ("####\n#GG#\n####", "[Gg]oal"),
    ("####\n#.G.\n####", "enclos|border"),
])
def test_layout_errors(text, pattern):
    with pytest.raises(gw.LayoutError, match=pattern):
        gw.parse_layout(text)


def test_bundled_maze_is_8x8():
    layout = gw.load_layout("maze")
    assert (layout.width, layout.height) == (8, 8)


@pytest.mark.parametrize("task", ALL_TASKS)
def test_bundled_layouts_round_trip(task):
    layout = gw.load_layout(task)
    again = gw.parse_layout(layout.to_text(), task)
    np.testing.assert_array_equal(layout.cells, again.cells)


def test_action_sets(specs):
    assert specs["maze"].action_set == ("up", "right", "down", "left")
    assert specs["xisland1"].action_set == ("up", "right", "down", "left")
    assert specs["doorkey1"].action_set == ("up", "right", "down", "left", "pickup", "open")
    assert specs["maze"].horizon == 4 * 8 * 8


# ---------------------------------------------------------------------------
# reset

def test_single_floor_cell_start():
    spec = _spec("####\n#.G#\n####")
    for seed in range(5):
        state, _ = gw.reset(spec, seed)
        assert state.agent_pos == (1, 1)


def test_reset_without_floor_is_configuration_error():
    spec = _spec("###\n#G#\n###")
    with pytest.raises(gw.ConfigurationError):
        gw.reset(spec, 0)


def test_reset_same_seed_same_state(specs):
    a, oa = gw.reset(specs["doorkey1"], 42)
    b, ob = gw.reset(specs["doorkey1"], 42)
    assert a == b
    np.testing.assert_array_equal(oa, ob)


def test_reset_is_uniform_over_ten_cells():
    spec = _spec("#######\n#.....#\n#.....#\n#G#####\n#######")
    rng = np.random.default_rng(0)
    counts = {}
    n = 10_000
    for _ in range(n):
        s, _ = gw.reset(spec, rng)
        counts[s.agent_pos] = counts.get(s.agent_pos, 0) + 1
    assert len(counts) == 10
    freqs = np.array(list(counts.values())) / n
    assert np.all(np.abs(freqs - 0.1) <= 0.05 * 0.1)  # within 5% of 0.1
    chi2 = float(((freqs * n - n / 10) ** 2 / (n / 10)).sum())
    assert chi2 < 27.88  # 9 degrees of freedom, p = 0.001


def test_reset_never_starts_on_key_or_goal(specs):
    spec = specs["doorkey1"]
    rng = np.random.default_rng(1)
    for _ in range(500):
        s, _ = gw.reset(spec, rng)
        assert spec.layout[s.agent_pos] == gw.Cell.FLOOR
        assert not s.has_key and not s.door_open and s.steps_elapsed == 0


# ---------------------------------------------------------------------------
# step

def test_blocked_move_changes_only_the_clock():
    spec = _spec("####\n#.G#\n####")
    s = gw.EnvState((1, 1))
    nxt, reward, done, _ = gw.step(spec, s, spec.action_index("up"))
    assert nxt.key == s.key
    assert nxt.steps_elapsed == 1
    assert reward == 0.0 and not done


def test_goal_reward_at_t10_with_horizon_100():
    spec = _spec("####\n#.G#\n####", horizon=100)
    s = gw.EnvState((1, 1), steps_elapsed=10)
    nxt, reward, done, _ = gw.step(spec, s, spec.action_index("right"))
    assert reward == pytest.approx(0.91)
    assert done and nxt.agent_pos == (1, 2)


def test_open_without_key_is_noop(specs):
    spec = specs["doorkey1"]
    door = spec.layout.door
    beside = (door[0], door[1] - 1)
    s = gw.EnvState(beside)
    nxt, _, _, _ = gw.step(spec, s, spec.action_index("open"))
    assert nxt.key == s.key


def test_pickup_and_open_sequence(specs):
    spec = specs["doorkey1"]
    key, door = spec.layout.key, spec.layout.door
    s = gw.EnvState(key)
    assert gw.is_applicable(spec, s, spec.action_index("pickup"))
    s, _, _, _ = gw.step(spec, s, spec.action_index("pickup"))
    assert s.has_key
    assert not gw.is_applicable(spec, s, spec.action_index("pickup"))
    s = replace(s, agent_pos=(door[0], door[1] - 1))
    s, _, _, _ = gw.step(spec, s, spec.action_index("open"))
    assert s.door_open
    again, _, _, _ = gw.step(spec, s, spec.action_index("open"))
    assert again.door_open and again.key == s.key


def test_step_after_done_raises():
    spec = _spec("####\n#.G#\n####")
    s, _, done, _ = gw.step(spec, gw.EnvState((1, 1)), spec.action_index("right"))
    assert done
    with pytest.raises(gw.EpisodeDoneError):
        gw.step(spec, s, 0)


def test_horizon_ends_episode():
    spec = _spec("#####\n#..G#\n#####", horizon=3)
    s = gw.EnvState((1, 1))
    for _ in range(3):
        s, reward, done, _ = gw.step(spec, s, spec.action_index("left"))
    assert done and reward == 0.0


# ---------------------------------------------------------------------------
# applicability and enumeration

@pytest.mark.parametrize("task", ALL_TASKS)
def test_oracle_matches_state_change_exhaustively(specs, task):
    spec = specs[task]
    for s in gw.enumerate_states(spec):
        for a in range(spec.n_actions):
            nxt, _, _, _ = gw.step(spec, s, a)
            assert gw.is_applicable(spec, s, a) == (nxt.key != s.key)


@pytest.mark.parametrize("task", ALL_TASKS)
def test_step_is_deterministic(specs, task):
    spec = specs[task]
    for s in gw.enumerate_states(spec):
        for a in range(spec.n_actions):
            a1 = gw.step(spec, s, a)
            a2 = gw.step(spec, s, a)
            assert a1[:3] == a2[:3]
            np.testing.assert_array_equal(a1[3], a2[3])


def test_maze_state_count_equals_free_cells(specs):
    spec = specs["maze"]
    free = len(spec.layout.positions(gw.Cell.FLOOR))
    assert len(gw.enumerate_states(spec)) == free


def test_keydoor_state_count_bounded(specs):
    spec = specs["doorkey1"]
    states = gw.enumerate_states(spec)
    free = int(np.isin(spec.layout.cells, (gw.Cell.FLOOR, gw.Cell.KEY, gw.Cell.DOOR)).sum())
    assert len(states) <= 3 * free
    assert len({s.key for s in states}) == len(states)
    assert all(not (s.door_open and not s.has_key) for s in states)


def test_one_free_cell_enumerates_one_state():
    assert len(gw.enumerate_states(_spec("####\n#.G#\n####"))) == 1


def test_enumeration_limit():
    with pytest.raises(gw.EnumerationLimitError) as info:
        gw.enumerate_states(gw.make_task("doorkey1"), limit=10)
    assert info.value.count > 10


def test_pruned_fraction_ordering_and_band(specs):
    fractions = {t: gw.pruned_fraction(specs[t]) for t in ALL_TASKS}
    assert fractions["doorkey1"] > fractions["xisland1"]
    assert 0.4 <= fractions["maze"] <= 0.6
    assert all(0.0 < f < 1.0 for f in fractions.values())


def test_open_floor_moves_are_all_applicable():
    spec = _spec("#####\n#...#\n#.G.#\n#...#\n#####")
    s = gw.EnvState((1, 2))
    assert not gw.is_applicable(spec, s, spec.action_index("up"))
    assert all(gw.is_applicable(spec, s, spec.action_index(a)) for a in ("right", "down", "left"))


# ---------------------------------------------------------------------------
# observations

@pytest.mark.parametrize("task", ALL_TASKS)
def test_observation_invariants(specs, task):
    spec = specs[task]
    seen = {}
    for s in gw.enumerate_states(spec):
        obs = gw.observe(spec, s)
        assert obs.shape == spec.obs_shape
        assert set(np.unique(obs)) <= {0.0, 1.0}
        assert obs[gw.CHANNELS.index("agent")].sum() == 1
        plane = obs[gw.CHANNELS.index("has_key")]
        assert plane.min() == plane.max()
        assert gw.decode_observation(spec, obs).key == s.key
        seen.setdefault(obs.tobytes(), s.key)
        assert seen[obs.tobytes()] == s.key


def test_observation_ignores_clock(specs):
    spec = specs["maze"]
    s, _ = gw.reset(spec, 0)
    np.testing.assert_array_equal(gw.observe(spec, s), gw.observe(spec, replace(s, steps_elapsed=17)))


# ---------------------------------------------------------------------------
# trajectories

@settings(max_examples=60, deadline=None)
@given(task=st.sampled_from(ALL_TASKS), seed=st.integers(0, 2**31 - 1),
       actions=st.lists(st.integers(0, 5), min_size=1, max_size=300))
def test_random_trajectories_keep_invariants(task, seed, actions):
    spec = gw.make_task(task)
    s, _ = gw.reset(spec, seed)
    total = 0.0
    door_was_open = False
    reached = False
    for a in actions:
        a = a % spec.n_actions
        s, reward, done, _ = gw.step(spec, s, a)
        total += reward
        assert spec.layout[s.agent_pos] not in (gw.Cell.WALL, gw.Cell.WATER)
        assert s.steps_elapsed <= spec.horizon
        if door_was_open:
            assert s.door_open
        if s.door_open:
            assert s.has_key
        door_was_open = s.door_open
        if done:
            reached = gw.is_goal(spec, s)
            break
    assert 0.0 <= total <= 1.0
    assert (total > 0) == reached


@pytest.mark.parametrize("task", ALL_TASKS)
def test_max_return_matches_shortest_path(specs, task):
    spec = specs[task]
    for pos in gw.start_cells(spec)[:5]:
        s = gw.EnvState(pos)
        d = gw.shortest_path_length(spec, s)
        assert d is not None and d >= 1
        assert gw.max_return(spec, s) == pytest.approx(1 - 0.9 * (d - 1) / spec.horizon)


@pytest.mark.parametrize("action", range(4))
def test_grid_env_wrapper_reports_applicability(action):
    env = gw.GridEnv(gw.make_task("maze"), seed=3)
    env.reset()
    expected = env.is_applicable(action)
    _, _, _, info = env.step(action)
    assert info["applicable"] == expected
