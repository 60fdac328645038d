"""Applicability functions C(s, a), action masks and the applicability classifier.

A knowledge source answers "how likely is action ``a`` to change the state
``s``?". Four kinds exist: the environment oracle, hand-coded partial knowledge
over a subset of the actions, a learned classifier, and a composite that lets
partial knowledge override the classifier on the actions it covers.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import gridworld as gw
from . import nn

MASKED_LOGIT = -1e9
DEFAULT_TAU = 0.5

APPLICABLE, INAPPLICABLE, NOT_A_CELL = 1, 0, -1


class AllMaskedWarning(RuntimeWarning):
    """Every action was masked; the unmasked distribution was used instead."""


class ActionSetMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# masking

def masked_logits(logits: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Replace masked logits by a huge negative constant.

    Rows whose mask is all zero keep their raw logits. Returns the new logits
    and a boolean (per row) telling whether that fallback happened.
    """
    logits = np.asarray(logits)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != mask.shape:
        raise ValueError(f"logits shape {logits.shape} does not match mask shape {mask.shape}")
    fallback = ~mask.any(axis=-1)
    keep = mask | fallback[..., None]
    return np.where(keep, logits, logits.dtype.type(MASKED_LOGIT)), fallback


def masked_distribution(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the applicable actions only."""
    z, fallback = masked_logits(logits, mask)
    if np.any(fallback):
        warnings.warn("all actions masked; sampling from the unmasked policy", AllMaskedWarning, stacklevel=2)
    return nn.softmax(z)


# ---------------------------------------------------------------------------
# labels and distances

DistanceMeasure = Callable[[gw.EnvState, gw.EnvState], float]


def identity_distance(s: gw.EnvState, s_next: gw.EnvState) -> float:
    """0 when the two states agree on position, key and door; 1 otherwise."""
    return 0.0 if s.key == s_next.key else 1.0


def label_applicability(s, s_next, distance: DistanceMeasure = identity_distance, eps: float = 0.0) -> int:
    """1 when the action that led from ``s`` to ``s_next`` had an effect."""
    if isinstance(s, np.ndarray):
        return int(not np.array_equal(s, s_next))
    return int(distance(s, s_next) > eps)


# ---------------------------------------------------------------------------
# classifier network

def classifier_head_layers(in_features: int, dropout: float = 0.3) -> list[nn.LayerSpec]:
    return [
        nn.BatchNorm(in_features), nn.Dense(in_features, 256), nn.ReLU(), nn.Dropout(dropout),
        nn.BatchNorm(256), nn.Dense(256, 96), nn.ReLU(), nn.Dropout(dropout),
        nn.BatchNorm(96), nn.Dense(96, 1),
    ]


class ClassifierNet:
    """Observation extractor + one-hot action encoder + binary MLP head.

    The head sees ``concat(features(obs), onehot(action))`` and emits one logit;
    its sigmoid is the probability that the action is applicable.
    """

    def __init__(self, norm: nn.Network, extractor: nn.Network, head: nn.Network,
                 action_set: tuple[str, ...], obs_shape: tuple[int, ...]):
        self.norm = norm
        self.extractor = extractor
        self.head = head
        self.action_set = tuple(action_set)
        self.obs_shape = tuple(obs_shape)

    @classmethod
    def create(cls, obs_shape, action_set, seed: int | np.random.Generator, arch: str = "desk",
               dropout: float = 0.3, dtype=nn.DEFAULT_DTYPE) -> "ClassifierNet":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        c, h, w = obs_shape
        ext_layers = nn.conv_extractor(obs_shape, arch)
        (features,) = nn.output_shape(ext_layers, (h, w, c))
        head_layers = classifier_head_layers(features + len(action_set), dropout)
        return cls(nn.Network.create([nn.BatchNorm(c)], rng, dtype), nn.Network.create(ext_layers, rng, dtype),
                   nn.Network.create(head_layers, rng, dtype), action_set, obs_shape)

    @property
    def n_actions(self) -> int:
        return len(self.action_set)

    @property
    def networks(self) -> list[nn.Network]:
        return [self.norm, self.extractor, self.head]

    @property
    def params(self) -> list[nn.NetworkParams]:
        return [n.params for n in self.networks]

    @property
    def version(self) -> tuple[int, ...]:
        return tuple(p.version for p in self.params)

    def copy(self) -> "ClassifierNet":
        return ClassifierNet(self.norm.copy(), self.extractor.copy(), self.head.copy(),
                             self.action_set, self.obs_shape)

    def _onehot(self, actions: np.ndarray, dtype) -> np.ndarray:
        out = np.zeros((len(actions), self.n_actions), dtype=dtype)
        out[np.arange(len(actions)), actions] = 1
        return out

    def forward(self, obs: np.ndarray, actions: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None, keys: np.ndarray | None = None):
        """Logits for ``(obs, action)`` pairs, keeping caches for :meth:`backward`.

        The input normalisation always sees the whole batch. Rows sharing a
        ``keys`` entry must be the same observation; the convolutions then run
        once per distinct key, which leaves every output and gradient unchanged.
        """
        x, c_norm = self.norm.forward(nn.to_channels_last(obs), training=training)
        first, inverse = nn.group_rows(keys, len(obs))
        feats_u, c_ext = self.extractor.forward(x[first], training=training, rng=rng)
        feats = feats_u[inverse]
        z = np.concatenate([feats, self._onehot(np.asarray(actions), feats.dtype)], axis=1)
        logits, c_head = self.head.forward(z, training=training, rng=rng)
        return logits[:, 0], (c_norm, c_ext, c_head, first, inverse)

    def backward(self, cache, dlogits: np.ndarray):
        c_norm, c_ext, c_head, first, inverse = cache
        g_head, dz = self.head.backward(c_head, dlogits[:, None])
        n_feats = dz.shape[1] - self.n_actions
        df = nn.scatter_rows(dz[:, :n_feats], inverse, len(first))
        g_ext, dx_u = self.extractor.backward(c_ext, df)
        # gamma/beta gradients are sums over rows, so grouped rows can be summed first
        if self.norm.params.version != c_norm.version:
            raise nn.StaleCacheError("parameters were updated after this forward pass")
        xhat = c_norm.entries[0][0][first]
        g_norm = [{"gamma": (dx_u * xhat).sum(axis=(0, 1, 2)), "beta": dx_u.sum(axis=(0, 1, 2))}]
        return [g_norm, g_ext, g_head]

    def all_action_logits(self, obs: np.ndarray) -> np.ndarray:
        """Inference logits ``(batch, n_actions)`` for every action of every observation."""
        x, _ = self.norm.forward(nn.to_channels_last(obs))
        feats, _ = self.extractor.forward(x)
        b, k = len(feats), self.n_actions
        onehot = np.tile(np.eye(k, dtype=feats.dtype), (b, 1))
        z = np.concatenate([np.repeat(feats, k, axis=0), onehot], axis=1)
        logits, _ = self.head.forward(z)
        return logits[:, 0].reshape(b, k)

    def expanded(self, action_set: Iterable[str]) -> "ClassifierNet":
        """Copy whose action encoder also covers ``action_set`` names it lacks.

        New one-hot columns get zero input weights and fresh batch-norm
        statistics, so predictions for the existing actions are unchanged.
        """
        new = [a for a in action_set if a not in self.action_set]
        clone = self.copy()
        if not new:
            return clone
        head = clone.head
        params, layers = head.params, head.layers
        k = len(new)
        bn_w, bn_buf = params.weights[0], params.buffers[0]
        dtype = bn_w["gamma"].dtype
        bn_w["gamma"] = np.concatenate([bn_w["gamma"], np.ones(k, dtype)])
        bn_w["beta"] = np.concatenate([bn_w["beta"], np.zeros(k, dtype)])
        bn_buf["running_mean"] = np.concatenate([bn_buf["running_mean"], np.zeros(k, dtype)])
        bn_buf["running_var"] = np.concatenate([bn_buf["running_var"], np.ones(k, dtype)])
        dense_w = params.weights[1]
        dense_w["W"] = np.concatenate([dense_w["W"], np.zeros((dense_w["W"].shape[0], k), dtype)], axis=1)
        m = layers[0].features + k
        head.layers = [nn.BatchNorm(m), nn.Dense(m, layers[1].out_features)] + layers[2:]
        clone.action_set = self.action_set + tuple(new)
        return clone


def classifier_probabilities(net: ClassifierNet, obs: np.ndarray) -> np.ndarray:
    single = obs.ndim == len(net.obs_shape)
    x = obs[None] if single else obs
    p = nn.sigmoid(net.all_action_logits(x).astype(np.float64))
    return p[0] if single else p


# ---------------------------------------------------------------------------
# knowledge sources

class KnowledgeSource:
    """Provider of applicability probabilities over a fixed action set."""

    tau: float = DEFAULT_TAU
    action_set: tuple[str, ...] = ()

    def probabilities(self, obs: np.ndarray) -> np.ndarray:
        """``(n_actions,)`` for one observation or ``(batch, n_actions)``."""
        raise NotImplementedError

    @property
    def n_actions(self) -> int:
        return len(self.action_set)


class OracleSource(KnowledgeSource):
    """Ground truth from the environment's ``is_applicable``."""

    def __init__(self, spec: gw.EnvSpec, tau: float = DEFAULT_TAU):
        self.spec = spec
        self.tau = tau
        self.action_set = spec.action_set

    def probabilities(self, obs: np.ndarray) -> np.ndarray:
        if obs.ndim == 4:
            return np.stack([self.probabilities(o) for o in obs])
        state = gw.decode_observation(self.spec, obs)
        return np.array([float(gw.is_applicable(self.spec, state, a)) for a in range(self.spec.n_actions)])


class PartialSource(KnowledgeSource):
    """Oracle answers for ``covered`` actions; every other action is allowed."""

    def __init__(self, spec: gw.EnvSpec, covered: Iterable[str], tau: float = DEFAULT_TAU):
        self.oracle = OracleSource(spec, tau)
        self.covered = frozenset(covered)
        unknown = self.covered - set(spec.action_set)
        if unknown:
            raise ValueError(f"actions {sorted(unknown)} are not in {spec.action_set}")
        self.tau = tau
        self.action_set = spec.action_set
        self.covered_mask = np.array([a in self.covered for a in self.action_set])

    def probabilities(self, obs: np.ndarray) -> np.ndarray:
        return np.where(self.covered_mask, self.oracle.probabilities(obs), 1.0)


class ClassifierSource(KnowledgeSource):
    """A learned classifier, possibly trained on a different action set.

    ``index_map[i]`` is the classifier's index for target action ``i``; actions
    listed in ``pending`` are answered permissively (probability 1) until the
    classifier has been trained on them.
    """

    def __init__(self, net: ClassifierNet, action_set: Iterable[str] | None = None,
                 tau: float = DEFAULT_TAU, pending: Iterable[str] = ()):
        self.net = net
        self.tau = tau
        self.action_set = tuple(action_set) if action_set is not None else net.action_set
        missing = [a for a in self.action_set if a not in net.action_set]
        if missing:
            raise ActionSetMismatch(f"classifier does not know actions {missing}")
        self.index_map = np.array([net.action_set.index(a) for a in self.action_set])
        self.pending = set(pending)

    @property
    def pending_mask(self) -> np.ndarray:
        return np.array([a in self.pending for a in self.action_set])

    def mark_trained(self) -> None:
        self.pending.clear()

    def probabilities(self, obs: np.ndarray) -> np.ndarray:
        p = classifier_probabilities(self.net, obs)[..., self.index_map]
        if self.pending:
            p = np.where(self.pending_mask, 1.0, p)
        return p


class CompositeSource(KnowledgeSource):
    """Partial knowledge where it exists, the classifier elsewhere."""

    def __init__(self, partial: PartialSource, classifier: ClassifierSource, tau: float = DEFAULT_TAU):
        if partial.action_set != classifier.action_set:
            raise ActionSetMismatch("partial knowledge and classifier disagree on the action set")
        self.partial = partial
        self.classifier = classifier
        self.tau = tau
        self.action_set = partial.action_set

    @property
    def net(self) -> ClassifierNet:
        return self.classifier.net

    def probabilities(self, obs: np.ndarray) -> np.ndarray:
        return np.where(self.partial.covered_mask, self.partial.probabilities(obs),
                        self.classifier.probabilities(obs))


def classify(source: KnowledgeSource, obs: np.ndarray, a: int) -> float:
    return float(source.probabilities(obs)[a])


def build_mask(source: KnowledgeSource, obs: np.ndarray, tau: float | None = None) -> np.ndarray:
    tau = source.tau if tau is None else tau
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return source.probabilities(obs) >= tau


# ---------------------------------------------------------------------------
# classifier training

@dataclass
class BalancedSample:
    indices: np.ndarray
    weighted: bool


def balanced_batch(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> BalancedSample:
    """Draw rows with replacement, each weighted by 1 / (size of its class).

    With a single class present the draw is uniform and ``weighted`` is False.
    """
    labels = np.asarray(labels).astype(int)
    if len(labels) == 0:
        raise ValueError("cannot sample from an empty buffer")
    counts = np.bincount(labels, minlength=2)
    if counts.min() == 0:
        return BalancedSample(rng.integers(0, len(labels), batch_size), weighted=False)
    weights = 1.0 / counts[labels]
    idx = rng.choice(len(labels), size=batch_size, replace=True, p=weights / weights.sum())
    return BalancedSample(idx, weighted=True)


class NonFiniteLossError(FloatingPointError):
    pass


def train_classifier_epoch(net: ClassifierNet, optimizer, obs: np.ndarray, actions: np.ndarray,
                           labels: np.ndarray, rng: np.random.Generator, batch_size: int = 64,
                           keys: np.ndarray | None = None) -> float:
    """One epoch of balanced minibatch BCE descent; returns the mean loss.

    The epoch draws ``ceil(len / batch_size)`` balanced minibatches.
    ``optimizer`` is anything with ``step(grads)`` over ``net.params``;
    ``keys`` are optional per-row state ids (see :meth:`ClassifierNet.forward`).
    """
    n = len(labels)
    n_batches = max(1, -(-n // batch_size))
    losses = []
    for _ in range(n_batches):
        sample = balanced_batch(labels, batch_size, rng)
        idx = sample.indices
        logits, cache = net.forward(obs[idx], actions[idx], training=True, rng=rng,
                                    keys=None if keys is None else keys[idx])
        loss, dlogits = nn.bce_with_logits(logits, labels[idx].astype(np.float64))
        if not np.isfinite(loss):
            raise NonFiniteLossError(
                f"classifier loss {loss} on a batch with {int(labels[idx].sum())}/{len(idx)} positives")
        optimizer.step(net.backward(cache, dlogits.astype(logits.dtype)))
        losses.append(loss)
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# exhaustive analyses

def _state_batch(spec: gw.EnvSpec, states: list[gw.EnvState]) -> np.ndarray:
    return np.stack([gw.observe(spec, s) for s in states])


def source_table(source: KnowledgeSource, spec: gw.EnvSpec,
                 states: list[gw.EnvState] | None = None) -> np.ndarray:
    """``(n_states, n_actions)`` probabilities over the enumerated states."""
    if states is None:
        states = gw.enumerate_states(spec)
    return np.asarray(source.probabilities(_state_batch(spec, states)), dtype=np.float64)


def exhaustive_accuracy(source: KnowledgeSource, spec: gw.EnvSpec, tau: float | None = None,
                        states: list[gw.EnvState] | None = None,
                        truth: np.ndarray | None = None) -> float:
    """Fraction of (state, action) pairs where the thresholded source agrees with the oracle."""
    tau = source.tau if tau is None else tau
    if states is None:
        states = gw.enumerate_states(spec)
    if truth is None:
        truth = gw.applicability_table(spec, states)
    pred = source_table(source, spec, states) >= tau
    return float((pred == truth).mean())


def initiation_set(source: KnowledgeSource, spec: gw.EnvSpec, a: int,
                   tau: float | None = None) -> set[tuple]:
    """Enumerated states (as ``EnvState.key``) where action ``a`` may start."""
    tau = source.tau if tau is None else tau
    states = gw.enumerate_states(spec)
    p = source_table(source, spec, states)[:, a]
    return {s.key for s, v in zip(states, p) if v >= tau}


def heatmap(source: KnowledgeSource, spec: gw.EnvSpec, a: int, tau: float | None = None,
            has_key: bool = False, door_open: bool = False) -> np.ndarray:
    """Per-cell applicability of action ``a`` at a fixed key/door context.

    Cells the agent cannot decide from (walls, water, the goal, a closed door)
    are :data:`NOT_A_CELL`.
    """
    tau = source.tau if tau is None else tau
    layout = spec.layout
    grid = np.full((layout.height, layout.width), NOT_A_CELL, dtype=int)
    cells = []
    for r in range(layout.height):
        for c in range(layout.width):
            kind = layout[(r, c)]
            if kind in (gw.Cell.FLOOR, gw.Cell.KEY) or (kind == gw.Cell.DOOR and door_open):
                cells.append((r, c))
    if not cells:
        return grid
    states = [gw.EnvState(agent_pos=pos, has_key=has_key, door_open=door_open) for pos in cells]
    p = source_table(source, spec, states)[:, a]
    for pos, v in zip(cells, p):
        grid[pos] = APPLICABLE if v >= tau else INAPPLICABLE
    return grid


def flag_contexts(spec: gw.EnvSpec) -> list[tuple[bool, bool]]:
    """Reachable (has_key, door_open) combinations."""
    if spec.layout.has_key_door:
        return [(False, False), (True, False), (True, True)]
    return [(False, False)]


def write_heatmap_csv(path: str | Path, grid: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "col", "value"])
        for r in range(grid.shape[0]):
            for c in range(grid.shape[1]):
                writer.writerow([r, c, int(grid[r, c])])


def read_heatmap_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    h = max(int(r["row"]) for r in rows) + 1
    w = max(int(r["col"]) for r in rows) + 1
    grid = np.full((h, w), NOT_A_CELL, dtype=int)
    for r in rows:
        grid[int(r["row"]), int(r["col"])] = int(r["value"])
    return grid
