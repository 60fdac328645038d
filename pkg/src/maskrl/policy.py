"""Actor-critic policy network and the PPO machinery around it.

The policy samples from the masked categorical distribution; behaviour
log-probabilities are stored together with the mask that produced them so the
importance ratio is evaluated under the same mask during the update.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .applicability import masked_logits


class MultiAdam:
    """Adam over several networks with optional global-norm gradient clipping."""

    def __init__(self, params: list[nn.NetworkParams], lr: float, max_grad_norm: float | None = None):
        self.params = params
        self.states = [nn.AdamState.for_params(p, lr=lr) for p in params]
        self.max_grad_norm = max_grad_norm

    def step(self, grads: list[list[dict[str, np.ndarray]]]) -> float:
        if self.max_grad_norm is not None:
            norm = nn.clip_grads(self.max_grad_norm, *grads)
        else:
            norm = nn.grad_norm(*grads)
        for state, p, g in zip(self.states, self.params, grads):
            nn.adam_step(state, p, g)
        return norm


class PolicyNet:
    """Shared extractor feeding a policy head (raw logits) and a value head."""

    def __init__(self, extractor: nn.Network, policy_head: nn.Network, value_head: nn.Network,
                 action_set: tuple[str, ...], obs_shape: tuple[int, ...]):
        self.extractor = extractor
        self.policy_head = policy_head
        self.value_head = value_head
        self.action_set = tuple(action_set)
        self.obs_shape = tuple(obs_shape)
        if policy_head.layers[-1].out_features != len(self.action_set):
            raise nn.ShapeError("policy head width does not match the action set")

    @classmethod
    def create(cls, obs_shape, action_set, seed: int, arch: str = "desk",
               layers: list[nn.LayerSpec] | None = None, dtype=nn.DEFAULT_DTYPE) -> "PolicyNet":
        rng = np.random.default_rng(seed)
        ext_layers = list(layers) if layers is not None else nn.conv_extractor(obs_shape, arch)
        c, h, w = obs_shape
        (features,) = nn.output_shape(ext_layers, (h, w, c))
        return cls(
            nn.Network.create(ext_layers, rng, dtype),
            nn.Network.create([nn.Dense(features, len(action_set))], rng, dtype),
            nn.Network.create([nn.Dense(features, 1)], rng, dtype),
            action_set, obs_shape,
        )

    @property
    def n_actions(self) -> int:
        return len(self.action_set)

    @property
    def networks(self) -> list[nn.Network]:
        return [self.extractor, self.policy_head, self.value_head]

    @property
    def params(self) -> list[nn.NetworkParams]:
        return [n.params for n in self.networks]

    @property
    def version(self) -> tuple[int, ...]:
        return tuple(p.version for p in self.params)

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.extractor.copy(), self.policy_head.copy(), self.value_head.copy(),
                         self.action_set, self.obs_shape)

    def forward(self, obs: np.ndarray, keys: np.ndarray | None = None):
        """Batched forward on ``(batch, C, H, W)`` keeping caches for :meth:`backward`.

        Rows sharing a ``keys`` entry must be the same observation; the
        extractor then runs once per distinct key.
        """
        first, inverse = nn.group_rows(keys, len(obs))
        feats_u, c_ext = self.extractor.forward(nn.to_channels_last(obs[first]))
        feats = feats_u[inverse]
        logits, c_pi = self.policy_head.forward(feats)
        values, c_v = self.value_head.forward(feats)
        return logits, values[:, 0], (c_ext, c_pi, c_v, inverse, len(first))

    def backward(self, caches, dlogits: np.ndarray, dvalues: np.ndarray):
        c_ext, c_pi, c_v, inverse, n_unique = caches
        g_pi, df_pi = self.policy_head.backward(c_pi, dlogits)
        g_v, df_v = self.value_head.backward(c_v, dvalues[:, None])
        df = nn.scatter_rows(df_pi + df_v, inverse, n_unique)
        g_ext, _ = self.extractor.backward(c_ext, df, input_grad=False)
        return [g_ext, g_pi, g_v]


def policy_forward(net: PolicyNet, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray | float]:
    """Raw (unmasked) logits and value estimate, for one observation or a batch."""
    single = obs.ndim == len(net.obs_shape)
    x = obs[None] if single else obs
    if x.shape[1:] != net.obs_shape:
        raise nn.ShapeError(f"observation shape {x.shape[1:]} != {net.obs_shape}")
    logits, values, _ = net.forward(x)
    if single:
        return logits[0], float(values[0])
    return logits, values


def masked_log_probs(logits: np.ndarray, masks: np.ndarray) -> np.ndarray:
    z, _ = masked_logits(logits, masks)
    return nn.log_softmax(z)


def sample_action(net: PolicyNet, obs: np.ndarray, mask: np.ndarray,
                  rng: np.random.Generator) -> tuple[int, float, float]:
    """Draw an action from the masked policy; returns (action, log_prob, value)."""
    logits, value = policy_forward(net, obs)
    logp = masked_log_probs(logits, np.asarray(mask, dtype=bool))
    probs = np.exp(logp.astype(np.float64))
    action = int(rng.choice(len(probs), p=probs / probs.sum()))
    return action, float(logp[action]), value


def compute_gae(rewards, values, dones, gamma: float, lam: float,
                last_value: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and returns for one contiguous trajectory.

    ``dones[t]`` marks that step ``t`` ended an episode; ``last_value`` bootstraps
    the step after the final one when the rollout stops mid-episode.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    n = len(rewards)
    adv = np.zeros(n)
    next_adv = 0.0
    next_value = float(last_value)
    for t in range(n - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    centred = adv - adv.mean()
    # second pass removes the rounding residue the guarded division would amplify
    centred -= centred.mean()
    return centred / max(centred.std(), 1e-8)


@dataclass
class RolloutBatch:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    masks: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray
    # optional per-row state ids; equal ids promise equal observations
    keys: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.actions)
        if self.keys is not None and len(self.keys) != n:
            raise ValueError(f"rollout field 'keys' has length {len(self.keys)}, expected {n}")
        for name in ("observations", "rewards", "dones", "masks", "log_probs", "values", "returns", "advantages"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"rollout field {name!r} has length {len(getattr(self, name))}, expected {n}")
        if not np.all(np.isfinite(self.advantages)):
            raise ValueError("advantages must be finite")

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class PPOStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    clip_fraction: float = 0.0
    approx_kl: float = 0.0
    skipped: int = 0
    first_ratios: np.ndarray | None = field(default=None, repr=False)
    n_minibatches: int = 0


@dataclass
class PPOConfig:
    clip: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    epochs: int = 10
    minibatch_size: int = 64
    lr: float = 3e-4
    max_grad_norm: float | None = None
    normalize_advantage: bool = True


def ppo_loss_grads(net: PolicyNet, obs, actions, masks, old_log_probs, advantages, returns,
                   clip: float, vf_coef: float, ent_coef: float, keys: np.ndarray | None = None):
    """Clipped-surrogate loss on one minibatch with gradients for every network."""
    logits, values, caches = net.forward(obs, keys)
    logits = logits.astype(np.float64)
    z, _ = masked_logits(logits, masks)
    logp_all = nn.log_softmax(z)
    probs = np.exp(logp_all)
    idx = np.arange(len(actions))
    logp = logp_all[idx, actions]

    valid = np.isfinite(old_log_probs)
    b = max(int(valid.sum()), 1)
    ratio = np.where(valid, np.exp(logp - np.where(valid, old_log_probs, 0.0)), 1.0)
    adv = np.where(valid, advantages, 0.0)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1 - clip, 1 + clip) * adv
    policy_loss = -float(np.minimum(surr1, surr2).sum() / b)

    # d(policy_loss)/d(logp): the unclipped branch is active iff surr1 <= surr2
    dlogp = np.where(valid & (surr1 <= surr2), -ratio * adv / b, 0.0)
    onehot = np.zeros_like(probs)
    onehot[idx, actions] = 1.0
    dlogits = dlogp[:, None] * (onehot - probs)

    safe_logp = np.where(probs > 0, logp_all, 0.0)
    entropy = -(probs * safe_logp).sum(axis=1)
    if ent_coef:
        dent = -probs * (safe_logp + entropy[:, None])
        dlogits -= ent_coef * dent * (valid / b)[:, None]

    err = values.astype(np.float64) - returns
    value_loss = float((err[valid] ** 2).sum() / b)
    dvalues = vf_coef * 2.0 * err * valid / b

    dtype = net.policy_head.params.weights[0]["W"].dtype
    grads = net.backward(caches, dlogits.astype(dtype), dvalues.astype(dtype))
    stats = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": float(entropy[valid].mean()) if valid.any() else 0.0,
        "clip_fraction": float((np.abs(ratio - 1) > clip)[valid].mean()) if valid.any() else 0.0,
        "approx_kl": float(((ratio - 1) - np.log(ratio))[valid].mean()) if valid.any() else 0.0,
        "skipped": int((~valid).sum()),
        "ratios": ratio,
    }
    return grads, stats


def ppo_epoch(net: PolicyNet, optimizer: MultiAdam, batch: RolloutBatch, advantages: np.ndarray,
              config: PPOConfig, rng: np.random.Generator, stats: PPOStats | None = None) -> PPOStats:
    """One shuffled pass of minibatch updates over ``batch``."""
    stats = stats or PPOStats()
    n = len(batch)
    order = rng.permutation(n)
    for start in range(0, n, config.minibatch_size):
        mb = order[start:start + config.minibatch_size]
        grads, s = ppo_loss_grads(
            net, batch.observations[mb], batch.actions[mb], batch.masks[mb], batch.log_probs[mb],
            advantages[mb], batch.returns[mb], config.clip, config.vf_coef, config.ent_coef,
            keys=None if batch.keys is None else batch.keys[mb])
        if stats.first_ratios is None:
            stats.first_ratios = s["ratios"]
        optimizer.step(grads)
        k = stats.n_minibatches
        for name in ("policy_loss", "value_loss", "entropy", "clip_fraction", "approx_kl"):
            setattr(stats, name, (getattr(stats, name) * k + s[name]) / (k + 1))
        stats.skipped += s["skipped"]
        stats.n_minibatches += 1
    return stats


def ppo_update(net: PolicyNet, optimizer: MultiAdam, batch: RolloutBatch, config: PPOConfig,
               rng: np.random.Generator) -> PPOStats:
    """``config.epochs`` passes of clipped-surrogate minibatch descent."""
    adv = normalize_advantages(batch.advantages) if config.normalize_advantage else batch.advantages
    stats = PPOStats()
    for _ in range(config.epochs):
        ppo_epoch(net, optimizer, batch, adv, config, rng, stats)
    return stats

