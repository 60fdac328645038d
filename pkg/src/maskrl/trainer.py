"""Joint training of a masked PPO policy and an applicability classifier.

Each iteration collects on-policy rollouts in which, at every step and with
probability ``epsilon``, the knowledge source's mask is applied to the policy;
otherwise the policy acts unmasked. Every transition is labelled with whether
it changed the state. The fresh buffer then feeds ``epochs`` passes of PPO and,
when enabled, ``epochs`` passes of class-balanced classifier training.

Gate polarity: a uniform draw strictly below ``epsilon`` applies the mask, so
``epsilon`` is the probability of masking (0 never masks, 1 always does).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import applicability as ap
from . import gridworld as gw
from . import nn, transfer
from .policy import MultiAdam, PolicyNet, PPOConfig, RolloutBatch, compute_gae, ppo_update

METRIC_COLUMNS = (
    "iteration", "env_steps", "mean_reward_norm", "mean_inapplicable_per_episode",
    "classifier_loss", "classifier_accuracy", "epsilon", "zero_mask_fallbacks", "seed",
)


class TrainingAborted(RuntimeError):
    """A non-finite loss or gradient stopped the run; ``dump`` holds the state summary."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


# ---------------------------------------------------------------------------
# epsilon schedules

@dataclass(frozen=True)
class Constant:
    value: float

    def __post_init__(self):
        _check_unit("epsilon", self.value)


@dataclass(frozen=True)
class Linear:
    start: float
    end: float
    over_iterations: int

    def __post_init__(self):
        _check_unit("epsilon start", self.start)
        _check_unit("epsilon end", self.end)
        if self.over_iterations < 1:
            raise ValueError("linear schedule needs over_iterations >= 1")


@dataclass(frozen=True)
class Piecewise:
    """``initial`` until the first boundary, then ``(iteration, value)`` steps."""

    initial: float
    steps: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        _check_unit("epsilon", self.initial)
        boundaries = [k for k, _ in self.steps]
        if boundaries != sorted(set(boundaries)):
            raise ValueError("piecewise boundaries must be strictly increasing")
        for _, v in self.steps:
            _check_unit("epsilon", v)


EpsilonSchedule = Constant | Linear | Piecewise


def _check_unit(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")


def epsilon_at(schedule: EpsilonSchedule, k: int) -> float:
    """Value of ``schedule`` at iteration ``k`` (0-based)."""
    if isinstance(schedule, Constant):
        return schedule.value
    if isinstance(schedule, Linear):
        frac = min(max(k / schedule.over_iterations, 0.0), 1.0)
        return schedule.start + (schedule.end - schedule.start) * frac
    if isinstance(schedule, Piecewise):
        value = schedule.initial
        for boundary, v in schedule.steps:
            if k >= boundary:
                value = v
        return value
    raise TypeError(f"malformed schedule {schedule!r}")


def schedule_epsilon(schedule: EpsilonSchedule, eps_k: float, k: int) -> float:
    """Epsilon for iteration ``k + 1`` given the value used at iteration ``k``."""
    _check_unit("epsilon", eps_k)
    return epsilon_at(schedule, k + 1)


def parse_schedule(text: str) -> EpsilonSchedule:
    """``0.5``, ``linear:0.5,0.1,100`` or ``piecewise:0.5;10=0.25;20=0.1``."""
    text = text.strip()
    try:
        if text.startswith("linear:"):
            a, b, n = text[len("linear:"):].split(",")
            return Linear(float(a), float(b), int(n))
        if text.startswith("piecewise:"):
            head, *rest = text[len("piecewise:"):].split(";")
            steps = []
            for item in rest:
                k, v = item.split("=")
                steps.append((int(k), float(v)))
            return Piecewise(float(head), tuple(steps))
        return Constant(float(text))
    except ValueError as exc:
        raise ValueError(f"malformed epsilon schedule {text!r}: {exc}") from None


def format_schedule(schedule: EpsilonSchedule) -> str:
    if isinstance(schedule, Constant):
        return repr(schedule.value)
    if isinstance(schedule, Linear):
        return f"linear:{schedule.start!r},{schedule.end!r},{schedule.over_iterations}"
    steps = "".join(f";{k}={v!r}" for k, v in schedule.steps)
    return f"piecewise:{schedule.initial!r}{steps}"


# ---------------------------------------------------------------------------
# configuration

@dataclass
class KnowledgeConfig:
    """Where masks come from.

    ``partial_actions`` (oracle answers for those actions only) may be combined
    with ``classifier``; ``oracle`` excludes both. ``classifier_checkpoint``
    starts the classifier from saved weights instead of a fresh init.
    """

    oracle: bool = False
    partial_actions: tuple[str, ...] = ()
    classifier: bool = False
    classifier_checkpoint: str | None = None

    def __post_init__(self):
        self.partial_actions = tuple(self.partial_actions)
        if self.oracle and (self.partial_actions or self.classifier):
            raise ValueError("the oracle already knows every action; drop partial/classifier")
        if self.classifier_checkpoint and not self.classifier:
            raise ValueError("a classifier checkpoint needs classifier=True")

    @property
    def any(self) -> bool:
        return self.oracle or bool(self.partial_actions) or self.classifier


@dataclass
class TrainerConfig:
    task: str = "maze"
    seed: int = 0
    epsilon: EpsilonSchedule = field(default_factory=lambda: Constant(0.5))
    tau: float = ap.DEFAULT_TAU
    knowledge: KnowledgeConfig = field(default_factory=KnowledgeConfig)
    train_classifier: bool = False
    n_workers: int = 1
    n_steps: int = 2048
    epochs: int = 10
    max_env_steps: int = 100_000
    iterations: int | None = None
    gamma: float = 0.99
    gae_lambda: float = 0.95
    ppo: PPOConfig = field(default_factory=PPOConfig)
    classifier_lr: float = 3e-4
    classifier_batch: int = 64
    early_stop_reward: float = 0.99
    early_stop_window: int = 10
    warm_start_checkpoint: str | None = None
    warm_start_shared_actions: bool = False
    expert_checkpoint: str | None = None
    psi: float = 0.0
    arch: str = "desk"

    def __post_init__(self):
        for name in ("n_workers", "n_steps", "epochs", "max_env_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.num_iterations < 1:
            raise ValueError("max_env_steps is smaller than one iteration of rollouts")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        _check_unit("psi", self.psi)
        if self.psi > 0 and not self.expert_checkpoint:
            raise ValueError("psi > 0 needs an expert checkpoint")
        if self.train_classifier and not self.knowledge.classifier:
            raise ValueError("train_classifier needs a classifier in the knowledge config")
        if isinstance(self.epsilon, str):
            self.epsilon = parse_schedule(self.epsilon)

    @property
    def steps_per_iteration(self) -> int:
        return self.n_workers * self.n_steps

    @property
    def num_iterations(self) -> int:
        """K: explicit, or as many full iterations as fit in ``max_env_steps``."""
        by_budget = self.max_env_steps // self.steps_per_iteration
        return by_budget if self.iterations is None else min(self.iterations, by_budget)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epsilon"] = format_schedule(self.epsilon)
        return d


# ---------------------------------------------------------------------------
# rollouts

@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    label: int
    mask: np.ndarray
    log_prob: float
    value: float
    done: bool


class StateIndex:
    """Dense ids for environment states; observations are a function of the id."""

    def __init__(self, spec: gw.EnvSpec):
        self.spec = spec
        self.ids: dict[tuple, int] = {}
        self.obs: list[np.ndarray] = []
        self.states: list[gw.EnvState] = []

    def __call__(self, state: gw.EnvState) -> int:
        i = self.ids.get(state.key)
        if i is None:
            i = len(self.obs)
            self.ids[state.key] = i
            clean = gw.EnvState(state.agent_pos, state.has_key, state.door_open)
            self.states.append(clean)
            self.obs.append(gw.observe(self.spec, clean))
        return i

    def observations(self, ids: np.ndarray) -> np.ndarray:
        table = np.stack(self.obs)
        return table[ids]


@dataclass
class EpisodeStats:
    returns: list[float] = field(default_factory=list)
    normalized: list[float] = field(default_factory=list)
    inapplicable: list[int] = field(default_factory=list)


class Worker:
    """One environment instance with its own random stream and episode bookkeeping."""

    def __init__(self, spec: gw.EnvSpec, rng: np.random.Generator):
        self.env = gw.GridEnv(spec)
        self.env.rng = rng
        self.rng = rng
        self.start_max = 0.0
        self.ep_return = 0.0
        self.ep_inapplicable = 0
        self._max_cache: dict[tuple, float] = {}
        self._reset()

    def _reset(self) -> None:
        self.env.reset()
        s = self.env.state
        if s.key not in self._max_cache:
            self._max_cache[s.key] = gw.max_return(self.env.spec, s)
        self.start_max = self._max_cache[s.key]
        self.ep_return = 0.0
        self.ep_inapplicable = 0

    def step(self, action: int, stats: EpisodeStats) -> tuple[gw.EnvState, gw.EnvState, float, bool]:
        prev = self.env.state
        _, reward, done, _ = self.env.step(action)
        nxt = self.env.state
        self.ep_return += reward
        if prev.key == nxt.key:
            self.ep_inapplicable += 1
        if done:
            stats.returns.append(self.ep_return)
            stats.normalized.append(self.ep_return / self.start_max if self.start_max > 0 else 0.0)
            stats.inapplicable.append(self.ep_inapplicable)
            self._reset()
        return prev, nxt, reward, done


class Rollout:
    """Columnar transitions from one worker; iterating yields :class:`Transition`."""

    def __init__(self, index: StateIndex, keys, next_keys, actions, rewards, dones, labels,
                 masks, log_probs, values, gated, fallbacks, last_value):
        self.index = index
        self.keys = np.asarray(keys, dtype=np.int64)
        self.next_keys = np.asarray(next_keys, dtype=np.int64)
        self.actions = np.asarray(actions, dtype=np.int64)
        self.rewards = np.asarray(rewards, dtype=np.float64)
        self.dones = np.asarray(dones, dtype=bool)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.masks = np.asarray(masks, dtype=bool).reshape(len(self.actions), -1)
        self.log_probs = np.asarray(log_probs, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)
        self.gated = np.asarray(gated, dtype=bool)
        self.fallbacks = int(fallbacks)
        self.last_value = float(last_value)

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, t: int) -> Transition:
        obs = self.index.obs
        return Transition(obs[self.keys[t]], int(self.actions[t]), float(self.rewards[t]),
                          obs[self.next_keys[t]], int(self.labels[t]), self.masks[t],
                          float(self.log_probs[t]), float(self.values[t]), bool(self.dones[t]))

    def __iter__(self) -> Iterator[Transition]:
        return (self[t] for t in range(len(self)))


class InferenceCache:
    """Per-state memo of policy outputs and masks, valid while parameters are frozen."""

    def __init__(self, index: StateIndex, policy: PolicyNet, source: ap.KnowledgeSource | None,
                 tau: float, expert: PolicyNet | None = None, expert_actions: np.ndarray | None = None):
        self.index = index
        self.policy = policy
        self.source = source
        self.tau = tau
        self.expert = expert
        self.expert_actions = expert_actions
        self._pi: dict[int, tuple[np.ndarray, float]] = {}
        self._mask: dict[int, np.ndarray] = {}
        self._expert: dict[int, np.ndarray] = {}

    def policy_out(self, i: int) -> tuple[np.ndarray, float]:
        out = self._pi.get(i)
        if out is None:
            logits, value, _ = self.policy.forward(self.index.obs[i][None])
            out = (logits[0].astype(np.float64), float(value[0]))
            self._pi[i] = out
        return out

    def mask(self, i: int) -> np.ndarray:
        m = self._mask.get(i)
        if m is None:
            m = ap.build_mask(self.source, self.index.obs[i], self.tau)
            self._mask[i] = m
        return m

    def expert_logits(self, i: int) -> np.ndarray:
        """Expert logits laid out over the learner's actions; unknown actions get -inf."""
        z = self._expert.get(i)
        if z is None:
            logits, _, _ = self.expert.forward(self.index.obs[i][None])
            z = np.full(self.policy.n_actions, -np.inf)
            known = self.expert_actions >= 0
            z[known] = logits[0].astype(np.float64)[self.expert_actions[known]]
            self._expert[i] = z
        return z


def _sample(logits: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> tuple[int, np.ndarray, bool]:
    z, fallback = ap.masked_logits(logits, mask)
    logp = nn.log_softmax(z)
    p = np.exp(logp)
    a = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
    a = min(a, len(p) - 1)
    while p[a] == 0.0:  # guard against landing on a zero-width bucket at the edge
        a -= 1
    return a, logp, bool(fallback)


def collect_trajectories(policy: PolicyNet, source: ap.KnowledgeSource | None, epsilon: float,
                         worker: Worker, steps: int, rng: np.random.Generator,
                         tau: float | None = None, stats: EpisodeStats | None = None,
                         cache: InferenceCache | None = None, psi: float = 0.0) -> Rollout:
    """Run ``steps`` environment steps with the epsilon-gated mask.

    When an expert is attached to ``cache`` and ``psi > 0``, the expert's
    masked distribution picks the action with probability ``psi``; the stored
    log-probability is always the learner's.
    """
    _check_unit("epsilon", epsilon)
    spec = worker.env.spec
    stats = stats if stats is not None else EpisodeStats()
    if cache is None:
        cache = InferenceCache(StateIndex(spec), policy, source, source.tau if tau is None and source else tau)
    index = cache.index
    n = spec.n_actions
    ones = np.ones(n, dtype=bool)
    cols = {k: [] for k in ("keys", "next_keys", "actions", "rewards", "dones", "labels",
                            "masks", "log_probs", "values", "gated")}
    fallbacks = 0
    for _ in range(steps):
        i = index(worker.env.state)
        logits, value = cache.policy_out(i)
        gate = source is not None and rng.random() < epsilon
        mask = cache.mask(i) if gate else ones
        if psi > 0 and rng.random() < psi:
            a, _, fb = _sample(cache.expert_logits(i), mask, rng)
            z, _ = ap.masked_logits(logits, mask)
            logp = nn.log_softmax(z)
        else:
            a, logp, fb = _sample(logits, mask, rng)
        fallbacks += fb
        prev, nxt, reward, done = worker.step(a, stats)
        cols["keys"].append(i)
        cols["next_keys"].append(index(nxt))
        cols["actions"].append(a)
        cols["rewards"].append(reward)
        cols["dones"].append(done)
        cols["labels"].append(ap.label_applicability(prev, nxt))
        cols["masks"].append(mask)
        cols["log_probs"].append(logp[a])
        cols["values"].append(value)
        cols["gated"].append(gate)
    last_value = cache.policy_out(index(worker.env.state))[1]
    return Rollout(index, **cols, fallbacks=fallbacks, last_value=last_value)


# ---------------------------------------------------------------------------
# training state

@dataclass
class MetricsRow:
    iteration: int
    env_steps: int
    mean_reward_norm: float
    mean_inapplicable_per_episode: float
    classifier_loss: float
    classifier_accuracy: float
    epsilon: float
    zero_mask_fallbacks: int
    seed: int

    def as_list(self) -> list:
        return [getattr(self, c) for c in METRIC_COLUMNS]


def _fmt(v) -> str:
    if isinstance(v, float):
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(round(v, 10))
    return str(v)


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(v) for v in r.as_list()])
    return buf.getvalue()


def write_metrics(path: str | Path, rows: list[MetricsRow]) -> None:
    Path(path).write_text(metrics_csv(rows))


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [{k: float(v) for k, v in row.items()} for row in reader]


class TrainerState:
    """Everything a run mutates: networks, optimizers, workers, random streams."""

    def __init__(self, config: TrainerConfig,
                 policy: PolicyNet | None = None,
                 classifier: ap.ClassifierNet | None = None,
                 expert: PolicyNet | None = None,
                 pending_actions: tuple[str, ...] = ()):
        self.config = config
        self.spec = gw.make_task(config.task, gamma=config.gamma)
        seq = np.random.SeedSequence(config.seed)
        init_seq, update_seq, *worker_seqs = seq.spawn(2 + config.n_workers)
        init_rng = np.random.default_rng(init_seq)
        self.update_rng = np.random.default_rng(update_seq)
        self.workers = [Worker(self.spec, np.random.default_rng(s)) for s in worker_seqs]
        k = config.knowledge
        if policy is None and config.warm_start_checkpoint:
            policy = transfer.warm_start(config.warm_start_checkpoint, self.spec.action_set,
                                         config.warm_start_shared_actions, seed=init_rng)
        if classifier is None and k.classifier_checkpoint:
            adapted = transfer.adapt_classifier(k.classifier_checkpoint, self.spec.action_set, config.tau)
            classifier, pending_actions = adapted.net, tuple(adapted.pending)
        if expert is None and config.expert_checkpoint:
            expert, _ = transfer.load_checkpoint(config.expert_checkpoint, kind="policy")
        self.policy = policy if policy is not None else PolicyNet.create(
            self.spec.obs_shape, self.spec.action_set, int(init_rng.integers(2**31)), arch=config.arch)
        if self.policy.action_set != self.spec.action_set:
            raise ap.ActionSetMismatch("policy action set differs from the task's")
        self.optimizer = MultiAdam(self.policy.params, lr=config.ppo.lr, max_grad_norm=config.ppo.max_grad_norm)

        self.classifier = None
        self.classifier_source: ap.ClassifierSource | None = None
        if k.classifier:
            net = classifier if classifier is not None else ap.ClassifierNet.create(
                self.spec.obs_shape, self.spec.action_set, int(init_rng.integers(2**31)), arch=config.arch)
            self.classifier = net
            self.classifier_source = ap.ClassifierSource(net, self.spec.action_set, config.tau,
                                                         pending=pending_actions)
            self.classifier_optimizer = MultiAdam(net.params, lr=config.classifier_lr)
        self.source: ap.KnowledgeSource | None = None
        if k.oracle:
            self.source = ap.OracleSource(self.spec, config.tau)
        elif k.partial_actions and self.classifier_source is not None:
            self.source = ap.CompositeSource(ap.PartialSource(self.spec, k.partial_actions, config.tau),
                                             self.classifier_source, config.tau)
        elif k.partial_actions:
            self.source = ap.PartialSource(self.spec, k.partial_actions, config.tau)
        elif self.classifier_source is not None:
            self.source = self.classifier_source

        self.expert = expert
        self.expert_actions = None
        if expert is not None:
            self.expert_actions = np.array([expert.action_set.index(a) if a in expert.action_set else -1
                                            for a in self.spec.action_set])
            if not (self.expert_actions >= 0).any():
                raise ap.ActionSetMismatch("expert policy shares no action with the task")

        self.index = StateIndex(self.spec)
        self.stats = EpisodeStats()
        self.iteration = 0
        self.env_steps = 0
        self.epsilon = epsilon_at(config.epsilon, 0)
        self.metrics: list[MetricsRow] = []
        self._last_reward = 0.0
        self._last_inapplicable = float("nan")
        self.best_accuracy = float("-inf")
        self.best_classifier: ap.ClassifierNet | None = None
        self._eval_states: list[gw.EnvState] | None = None
        self._truth: np.ndarray | None = None
        try:
            self._eval_states = gw.enumerate_states(self.spec)
            self._truth = gw.applicability_table(self.spec, self._eval_states)
        except gw.EnumerationLimitError:
            pass

    def classifier_accuracy(self) -> float:
        if self.classifier_source is None or self._eval_states is None:
            return float("nan")
        return ap.exhaustive_accuracy(self.classifier_source, self.spec, self.config.tau,
                                      self._eval_states, self._truth)

    def dump(self) -> dict:
        return {
            "task": self.config.task,
            "seed": self.config.seed,
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "epsilon": self.epsilon,
            "last_metrics": asdict(self.metrics[-1]) if self.metrics else None,
        }


def train_iteration(state: TrainerState, config: TrainerConfig | None = None) -> MetricsRow:
    """One iteration: collect, optimize the policy, optionally the classifier, advance epsilon."""
    config = config or state.config
    eps = state.epsilon
    cache = InferenceCache(state.index, state.policy, state.source, config.tau,
                           state.expert, state.expert_actions)
    stats = EpisodeStats()
    rollouts = [collect_trajectories(state.policy, state.source, eps, w, config.n_steps, w.rng,
                                     config.tau, stats, cache, psi=config.psi)
                for w in state.workers]

    advs, rets = [], []
    for r in rollouts:
        adv, ret = compute_gae(r.rewards, r.values, r.dones, config.gamma, config.gae_lambda, r.last_value)
        advs.append(adv)
        rets.append(ret)
    keys = np.concatenate([r.keys for r in rollouts])
    obs = state.index.observations(keys)
    actions = np.concatenate([r.actions for r in rollouts])
    labels = np.concatenate([r.labels for r in rollouts])
    batch = RolloutBatch(
        observations=obs, actions=actions,
        rewards=np.concatenate([r.rewards for r in rollouts]),
        dones=np.concatenate([r.dones for r in rollouts]),
        masks=np.concatenate([r.masks for r in rollouts]),
        log_probs=np.concatenate([r.log_probs for r in rollouts]),
        values=np.concatenate([r.values for r in rollouts]),
        returns=np.concatenate(rets), advantages=np.concatenate(advs), keys=keys,
    )
    ppo_cfg = PPOConfig(**{**asdict(config.ppo), "epochs": config.epochs})
    try:
        ppo_update(state.policy, state.optimizer, batch, ppo_cfg, state.update_rng)
        clf_loss = float("nan")
        if config.train_classifier:
            # the classifier may index actions differently after a transfer
            clf_actions = state.classifier_source.index_map[actions]
            losses = [ap.train_classifier_epoch(state.classifier, state.classifier_optimizer, obs, clf_actions,
                                                labels, state.update_rng, config.classifier_batch, keys=keys)
                      for _ in range(config.epochs)]
            clf_loss = float(np.mean(losses))
            state.classifier_source.mark_trained()
    except (nn.NonFiniteGradientError, ap.NonFiniteLossError, FloatingPointError) as exc:
        raise TrainingAborted(str(exc), state.dump()) from exc

    state.env_steps += len(batch)
    if stats.normalized:
        state._last_reward = float(np.mean(stats.normalized))
        state._last_inapplicable = float(np.mean(stats.inapplicable))
    row = MetricsRow(
        iteration=state.iteration,
        env_steps=state.env_steps,
        mean_reward_norm=state._last_reward,
        mean_inapplicable_per_episode=state._last_inapplicable,
        classifier_loss=clf_loss,
        classifier_accuracy=state.classifier_accuracy(),
        epsilon=eps,
        zero_mask_fallbacks=sum(r.fallbacks for r in rollouts),
        seed=config.seed,
    )
    if row.classifier_accuracy > state.best_accuracy:
        # first iteration at the highest exhaustive accuracy seen so far
        state.best_accuracy = row.classifier_accuracy
        state.best_classifier = state.classifier.copy()
    state.metrics.append(row)
    state.epsilon = schedule_epsilon(config.epsilon, eps, state.iteration)
    state.iteration += 1
    state.last_rollouts = rollouts
    return row


@dataclass
class RunResult:
    policy: PolicyNet
    classifier: ap.ClassifierNet | None
    metrics: list[MetricsRow]
    stopped_early: bool
    state: TrainerState = field(repr=False)

    @property
    def best_classifier(self) -> ap.ClassifierNet | None:
        """Classifier snapshot from the iteration with the best exhaustive accuracy."""
        return self.state.best_classifier


def run(config: TrainerConfig, state: TrainerState | None = None,
        on_iteration: Callable[[MetricsRow], None] | None = None) -> RunResult:
    """Train for K iterations, or until the reward stays at the early-stop level."""
    state = state or TrainerState(config)
    streak = 0
    stopped = False
    while state.iteration < config.num_iterations:
        row = train_iteration(state, config)
        if on_iteration is not None:
            on_iteration(row)
        streak = streak + 1 if row.mean_reward_norm >= config.early_stop_reward else 0
        if streak >= config.early_stop_window:
            stopped = True
            break
    return RunResult(state.policy, state.classifier, state.metrics, stopped, state)


def dump_state(path: str | Path, dump: dict) -> None:
    Path(path).write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n")
