from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskrl import applicability as ap
from maskrl import gridworld as gw
from maskrl import nn
from maskrl.policy import MultiAdam

MAZE = gw.make_task("maze")
DOORKEY = gw.make_task("doorkey1")
UP, RIGHT, DOWN, LEFT = range(4)


def _obs(spec, state):
    return gw.observe(spec, state)


def _random_walk(spec, n, seed):
    rng = np.random.default_rng(seed)
    s, obs = gw.reset(spec, rng)
    rows = []
    for _ in range(n):
        a = int(rng.integers(spec.n_actions))
        nxt, _, done, o2 = gw.step(spec, s, a)
        rows.append((s, a, nxt, obs))
        s, obs = (gw.reset(spec, rng) if done else (nxt, o2))
    return rows


# ---------------------------------------------------------------------------
# masked distribution

def test_masked_distribution_examples():
    logits = np.array([2.0, 1.0, 0.0, -1.0])
    np.testing.assert_allclose(ap.masked_distribution(logits, np.ones(4)), [0.6439, 0.2369, 0.0871, 0.0321],
                               atol=1e-4)
    np.testing.assert_allclose(ap.masked_distribution(logits, [1, 0, 1, 1]), [0.8437, 0, 0.1142, 0.0420],
                               atol=1e-4)
    np.testing.assert_allclose(ap.masked_distribution(logits, [0, 0, 1, 0]), [0, 0, 1, 0], atol=1e-12)


def test_all_zero_mask_falls_back_with_warning():
    logits = np.array([2.0, 1.0, 0.0, -1.0])
    with pytest.warns(ap.AllMaskedWarning):
        p = ap.masked_distribution(logits, np.zeros(4))
    np.testing.assert_allclose(p, nn.softmax(logits))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        ap.masked_logits(np.zeros(4), np.ones(3))


@settings(max_examples=100, deadline=None)
@given(logits=st.lists(st.floats(-20, 20), min_size=2, max_size=8), data=st.data())
def test_masked_distribution_preserves_ratios(logits, data):
    logits = np.array(logits)
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=len(logits), max_size=len(logits))))
    if not mask.any():
        mask[0] = True
    p = ap.masked_distribution(logits, mask)
    assert p.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(p[~mask] == 0)
    q = nn.softmax(logits)
    i, *rest = np.flatnonzero(mask)
    for j in rest:
        assert p[j] / p[i] == pytest.approx(q[j] / q[i], rel=1e-6)


# ---------------------------------------------------------------------------
# sources and masks

def test_oracle_reads_walls():
    # maze start cells with a wall above and to the left
    oracle = ap.OracleSource(MAZE)
    for s in gw.enumerate_states(MAZE):
        r, c = s.agent_pos
        wall_up = MAZE.layout[(r - 1, c)] == gw.Cell.WALL
        wall_left = MAZE.layout[(r, c - 1)] == gw.Cell.WALL
        if wall_up and wall_left:
            m = ap.build_mask(oracle, _obs(MAZE, s))
            assert m[UP] == 0 and m[LEFT] == 0
            assert list(m) == [gw.is_applicable(MAZE, s, a) for a in range(4)]
            break
    else:
        pytest.skip("layout has no cell walled above and to the left")


def test_partial_source_is_permissive_outside_coverage():
    part = ap.PartialSource(MAZE, ("up", "down"))
    for s in gw.enumerate_states(MAZE)[:10]:
        p = part.probabilities(_obs(MAZE, s))
        assert p[LEFT] == 1.0 and p[RIGHT] == 1.0
        assert p[UP] == float(gw.is_applicable(MAZE, s, UP))


def test_partial_source_rejects_unknown_actions():
    with pytest.raises(ValueError):
        ap.PartialSource(MAZE, ("jump",))


def test_untrained_classifier_is_undecided():
    obs = _obs(MAZE, gw.enumerate_states(MAZE)[0])
    for seed in range(100):
        src = ap.ClassifierSource(ap.ClassifierNet.create(MAZE.obs_shape, MAZE.action_set, seed))
        p = ap.classify(src, obs, UP)
        assert 0.2 < p < 0.8


class _Fixed(ap.KnowledgeSource):
    def __init__(self, p):
        self.p = np.asarray(p, dtype=float)
        self.action_set = tuple("abcd")

    def probabilities(self, obs):
        return self.p


def test_threshold_examples():
    assert list(ap.build_mask(_Fixed([0.5] * 4), None, 0.5)) == [1, 1, 1, 1]
    assert list(ap.build_mask(_Fixed([0.9, 0.4, 0.51, 0.1]), None, 0.5)) == [1, 0, 1, 0]
    with pytest.raises(ValueError):
        ap.build_mask(_Fixed([0.5] * 4), None, 1.0)


def test_composite_prefers_partial_knowledge():
    clf = ap.ClassifierSource(ap.ClassifierNet.create(DOORKEY.obs_shape, DOORKEY.action_set, 0))
    part = ap.PartialSource(DOORKEY, gw.MOVE_ACTIONS)
    comp = ap.CompositeSource(part, clf)
    obs = _obs(DOORKEY, gw.enumerate_states(DOORKEY)[3])
    p = comp.probabilities(obs)
    np.testing.assert_array_equal(p[:4], part.probabilities(obs)[:4])
    np.testing.assert_allclose(p[4:], clf.probabilities(obs)[4:])


# ---------------------------------------------------------------------------
# labels

def test_label_examples():
    spec = DOORKEY
    s = gw.EnvState(spec.layout.key)
    picked, _, _, _ = gw.step(spec, s, spec.action_index("pickup"))
    assert ap.label_applicability(s, picked) == 1
    blocked = next(st_ for st_ in gw.enumerate_states(spec) if not gw.is_applicable(spec, st_, UP))
    nxt, _, _, _ = gw.step(spec, blocked, UP)
    assert ap.label_applicability(blocked, nxt) == 0


def test_labels_match_oracle_on_random_walk():
    for s, a, nxt, _ in _random_walk(DOORKEY, 10_000, seed=0):
        assert ap.label_applicability(s, nxt) == int(gw.is_applicable(DOORKEY, s, a))


# ---------------------------------------------------------------------------
# balanced sampling

def test_balanced_sampler_on_skewed_buffer():
    labels = np.array([1] * 90 + [0] * 10)
    sample = ap.balanced_batch(labels, 10_000, np.random.default_rng(0))
    frac = float((labels[sample.indices] == 0).mean())
    assert sample.weighted and 0.45 <= frac <= 0.55


def test_balanced_sampler_even_buffer_is_uniform():
    labels = np.array([0, 1] * 50)
    sample = ap.balanced_batch(labels, 50_000, np.random.default_rng(1))
    counts = np.bincount(sample.indices, minlength=100)
    assert counts.min() > 0.7 * 500 and counts.max() < 1.3 * 500


def test_balanced_sampler_single_class_is_flagged():
    sample = ap.balanced_batch(np.ones(20, int), 64, np.random.default_rng(0))
    assert not sample.weighted and len(sample.indices) == 64


# ---------------------------------------------------------------------------
# classifier training

def test_separable_set_is_learned():
    rng = np.random.default_rng(0)
    shape = (1, 5, 5)
    obs = rng.normal(size=(256,) + shape).astype(np.float32)
    labels = (obs[:, 0, 2, 2] > 0).astype(int)
    actions = np.zeros(256, int)
    net = ap.ClassifierNet.create(shape, ("a",), 0)
    opt = MultiAdam(net.params, 3e-4)
    for _ in range(50):
        ap.train_classifier_epoch(net, opt, obs, actions, labels, rng)
    logits, _ = net.forward(obs, actions)
    loss, _ = nn.bce_with_logits(logits.astype(np.float64), labels.astype(np.float64))
    assert loss < 0.05


def test_confident_correct_predictions_give_small_loss_and_gradient():
    y = np.array([1.0, 0.0, 1.0, 0.0])
    loss, grad = nn.bce_with_logits((y * 2 - 1) * 20.0, y)
    assert loss < 1e-6
    assert np.abs(grad).max() < 1e-6


def test_classifier_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    shape = (2, 5, 5)
    net = ap.ClassifierNet.create(shape, ("a", "b"), 0, dropout=0.0, dtype=np.float64)
    obs = rng.normal(size=(6,) + shape)
    actions = rng.integers(0, 2, 6)
    y = rng.integers(0, 2, 6).astype(np.float64)

    def loss():
        logits, _ = net.forward(obs, actions, training=True)
        return nn.bce_with_logits(logits, y)[0]

    logits, cache = net.forward(obs, actions, training=True)
    _, dl = nn.bce_with_logits(logits, y)
    grads = net.backward(cache, dl)
    h = 1e-5
    for sub, g_sub in zip(net.params, grads):
        for w, gw_ in zip(sub.weights, g_sub):
            for name, t in w.items():
                flat = t.reshape(-1)
                for i in range(0, flat.size, max(1, flat.size // 5)):
                    orig = flat[i]
                    flat[i] = orig + h
                    up = loss()
                    flat[i] = orig - h
                    down = loss()
                    flat[i] = orig
                    num = (up - down) / (2 * h)
                    assert gw_[name].reshape(-1)[i] == pytest.approx(num, rel=1e-4, abs=1e-7)


def test_key_dedup_leaves_gradients_unchanged():
    rng = np.random.default_rng(0)
    states = gw.enumerate_states(MAZE)[:6]
    idx = rng.integers(0, 6, 20)
    obs = np.stack([_obs(MAZE, states[i]) for i in idx])
    actions = rng.integers(0, 4, 20)
    y = rng.integers(0, 2, 20).astype(np.float64)
    net = ap.ClassifierNet.create(MAZE.obs_shape, MAZE.action_set, 1, dropout=0.0, dtype=np.float64)
    obs = obs.astype(np.float64)
    results = []
    for keys in (None, idx):
        logits, cache = net.forward(obs, actions, training=True, keys=keys)
        _, dl = nn.bce_with_logits(logits, y)
        results.append((logits, net.backward(cache, dl)))
    np.testing.assert_allclose(results[0][0], results[1][0], rtol=1e-12, atol=1e-12)
    for ga, gb in zip(results[0][1], results[1][1]):
        for la, lb in zip(ga, gb):
            for k in la:
                np.testing.assert_allclose(la[k], lb[k], rtol=1e-9, atol=1e-12)


def test_stale_cache_is_rejected():
    net = ap.ClassifierNet.create(MAZE.obs_shape, MAZE.action_set, 0)
    obs = np.stack([_obs(MAZE, s) for s in gw.enumerate_states(MAZE)[:4]])
    logits, cache = net.forward(obs, np.zeros(4, int), training=True, rng=np.random.default_rng(0))
    MultiAdam(net.params, 1e-3).step(net.backward(cache, np.ones(4, np.float32)))
    with pytest.raises(nn.StaleCacheError):
        net.backward(cache, np.ones(4, np.float32))


@pytest.mark.slow
def test_maze_buffer_of_50k_steps_is_learned():
    rows = _random_walk(MAZE, 50_000, seed=0)
    index = {}
    keys = np.array([index.setdefault(s.key, len(index)) for s, _, _, _ in rows])
    obs = np.stack([o for _, _, _, o in rows])
    actions = np.array([a for _, a, _, _ in rows])
    labels = np.array([ap.label_applicability(s, n) for s, _, n, _ in rows])
    net = ap.ClassifierNet.create(MAZE.obs_shape, MAZE.action_set, 0)
    opt = MultiAdam(net.params, 3e-4)
    rng = np.random.default_rng(0)
    for _ in range(3):
        ap.train_classifier_epoch(net, opt, obs, actions, labels, rng, keys=keys)
    assert ap.exhaustive_accuracy(ap.ClassifierSource(net), MAZE) >= 0.99


# ---------------------------------------------------------------------------
# transfer-related network surgery

def test_expanded_classifier_keeps_shared_predictions():
    net = ap.ClassifierNet.create(MAZE.obs_shape, MAZE.action_set, 0)
    big = net.expanded(DOORKEY.action_set)
    assert big.action_set == DOORKEY.action_set
    obs = np.stack([_obs(MAZE, s) for s in gw.enumerate_states(MAZE)])
    np.testing.assert_allclose(big.all_action_logits(obs)[:, :4], net.all_action_logits(obs), rtol=1e-5, atol=1e-6)


def test_classifier_source_projects_by_name():
    net = ap.ClassifierNet.create(DOORKEY.obs_shape, DOORKEY.action_set, 0)
    src = ap.ClassifierSource(net, MAZE.action_set)
    obs = _obs(MAZE, gw.enumerate_states(MAZE)[0])
    np.testing.assert_allclose(src.probabilities(obs), ap.classifier_probabilities(net, obs)[:4])
    with pytest.raises(ap.ActionSetMismatch):
        ap.ClassifierSource(ap.ClassifierNet.create(MAZE.obs_shape, MAZE.action_set, 0), DOORKEY.action_set)


def test_pending_actions_are_permissive_until_trained():
    net = ap.ClassifierNet.create(DOORKEY.obs_shape, DOORKEY.action_set, 0)
    src = ap.ClassifierSource(net, pending=("open",))
    obs = _obs(DOORKEY, gw.enumerate_states(DOORKEY)[0])
    assert src.probabilities(obs)[5] == 1.0
    src.mark_trained()
    assert src.probabilities(obs)[5] == pytest.approx(ap.classifier_probabilities(net, obs)[5])


# ---------------------------------------------------------------------------
# exhaustive analyses

@pytest.mark.parametrize("task", sorted(gw.TASKS))
def test_oracle_initiation_sets_match_brute_force(task):
    spec = gw.make_task(task)
    oracle = ap.OracleSource(spec)
    for a in range(spec.n_actions):
        expected = {s.key for s in gw.enumerate_states(spec) if gw.is_applicable(spec, s, a)}
        assert ap.initiation_set(oracle, spec, a) == expected


def test_tiny_tau_admits_every_state():
    src = ap.ClassifierSource(ap.ClassifierNet.create(MAZE.obs_shape, MAZE.action_set, 0))
    assert len(ap.initiation_set(src, MAZE, LEFT, tau=1e-12)) == len(gw.enumerate_states(MAZE))


def test_oracle_heatmap_matches_layout():
    grid = ap.heatmap(ap.OracleSource(MAZE), MAZE, LEFT)
    layout = MAZE.layout
    for (r, c), v in np.ndenumerate(grid):
        kind = layout[(r, c)]
        if kind in (gw.Cell.WALL, gw.Cell.WATER, gw.Cell.GOAL):
            assert v == ap.NOT_A_CELL
        else:
            blocked = layout[(r, c - 1)] == gw.Cell.WALL
            assert v == (ap.INAPPLICABLE if blocked else ap.APPLICABLE)


def test_open_heatmap_is_adjacent_to_door():
    spec = DOORKEY
    grid = ap.heatmap(ap.OracleSource(spec), spec, spec.action_index("open"), has_key=True, door_open=False)
    dr, dc = spec.layout.door
    for (r, c), v in np.ndenumerate(grid):
        if v == ap.NOT_A_CELL:
            continue
        adjacent = abs(r - dr) + abs(c - dc) == 1
        assert (v == ap.APPLICABLE) == adjacent


def test_heatmap_csv_round_trip(tmp_path):
    grid = ap.heatmap(ap.OracleSource(DOORKEY), DOORKEY, 0)
    path = tmp_path / "h.csv"
    ap.write_heatmap_csv(path, grid)
    np.testing.assert_array_equal(ap.read_heatmap_csv(path), grid)
    assert path.read_text().startswith("row,col,value\n")


def test_oracle_accuracy_is_one():
    for task in gw.TASKS:
        spec = gw.make_task(task)
        assert ap.exhaustive_accuracy(ap.OracleSource(spec), spec) == 1.0
