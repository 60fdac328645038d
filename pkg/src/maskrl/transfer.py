"""Checkpoints and the three ways of carrying knowledge into a new task.

File layout::

    MASKRL-CKPT v1\\n
    {json description on one line}\\n
    <little-endian float32 tensors, in the order the description lists them>

The description names the network kind, the action ordering, the observation
shape, every sub-network's layer list and each tensor's shape, plus free-form
metadata (source task, training env steps).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import applicability as ap
from . import nn
from .policy import PolicyNet

MAGIC = b"MASKRL-CKPT"
FORMAT_VERSION = 1
WEIGHT_DTYPE = np.dtype("<f4")

POLICY_PARTS = ("extractor", "policy_head", "value_head")
CLASSIFIER_PARTS = ("norm", "extractor", "head")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def _parts(net) -> tuple[str, tuple[str, ...]]:
    if isinstance(net, PolicyNet):
        return "policy", POLICY_PARTS
    if isinstance(net, ap.ClassifierNet):
        return "classifier", CLASSIFIER_PARTS
    raise TypeError(f"cannot checkpoint {type(net).__name__}")


def save_checkpoint(net: PolicyNet | ap.ClassifierNet, path: str | Path, meta: dict | None = None) -> None:
    """Write ``net`` to ``path``; weights must be float32 so the round trip is exact."""
    kind, names = _parts(net)
    networks, blobs = [], []
    for name in names:
        sub: nn.Network = getattr(net, name)
        tensors = []
        for i, (w, b) in enumerate(zip(sub.params.weights, sub.params.buffers)):
            for group, store in (("weights", w), ("buffers", b)):
                for tname, t in store.items():
                    if t.dtype != np.float32:
                        raise TypeError(f"{name}[{i}].{tname} is {t.dtype}; checkpoints hold float32 only")
                    tensors.append({"layer": i, "group": group, "name": tname, "shape": list(t.shape)})
                    blobs.append(np.ascontiguousarray(t, dtype=WEIGHT_DTYPE).tobytes())
        networks.append({"name": name, "layers": [nn.layer_to_dict(l) for l in sub.layers], "tensors": tensors})
    desc = {
        "kind": kind,
        "action_set": list(net.action_set),
        "obs_shape": list(net.obs_shape),
        "networks": networks,
        "meta": meta or {},
    }
    payload = b"".join(blobs)
    desc["payload_bytes"] = len(payload)
    header = MAGIC + b" v%d\n" % FORMAT_VERSION + json.dumps(desc, sort_keys=True).encode() + b"\n"
    Path(path).write_bytes(header + payload)


def _split(data: bytes) -> tuple[dict, bytes]:
    first = data.find(b"\n")
    if first < 0:
        raise CheckpointTruncatedError("file ends inside the header line")
    magic, _, version = data[:first].partition(b" v")
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version_no = int(version)
    except ValueError:
        raise CheckpointVersionError(f"unreadable format version {version!r}") from None
    if version_no != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version_no} is not supported (expected {FORMAT_VERSION})")
    second = data.find(b"\n", first + 1)
    if second < 0:
        raise CheckpointTruncatedError("file ends inside the description block")
    try:
        desc = json.loads(data[first + 1:second])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt description block: {exc}") from None
    return desc, data[second + 1:]


def load_checkpoint(path: str | Path, action_set: tuple[str, ...] | None = None,
                    kind: str | None = None) -> tuple[PolicyNet | ap.ClassifierNet, dict]:
    """Read a checkpoint back into a network; returns ``(net, meta)``.

    ``action_set`` (when given) must equal the stored ordering exactly;
    ``kind`` restricts the accepted network kind.
    """
    desc, payload = _split(Path(path).read_bytes())
    declared = int(desc.get("payload_bytes", -1))
    if len(payload) < declared:
        raise CheckpointTruncatedError(f"payload has {len(payload)} bytes, header declares {declared}")
    if kind is not None and desc["kind"] != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, found {desc['kind']}")
    stored_actions = tuple(desc["action_set"])
    if action_set is not None and tuple(action_set) != stored_actions:
        raise ap.ActionSetMismatch(
            f"checkpoint covers {len(stored_actions)} actions {stored_actions}, task has {len(action_set)} {tuple(action_set)}")

    offset = 0
    subnets = {}
    for entry in desc["networks"]:
        layers = [nn.layer_from_dict(d) for d in entry["layers"]]
        reference = nn.xavier_init(layers, 0)
        weights = [dict() for _ in layers]
        buffers = [dict() for _ in layers]
        for t in entry["tensors"]:
            i, group, name, shape = t["layer"], t["group"], t["name"], tuple(t["shape"])
            expected = getattr(reference, group)[i].get(name) if i < len(layers) else None
            if expected is None or expected.shape != shape:
                raise CheckpointShapeError(
                    f"{entry['name']}[{i}].{name}: stored shape {shape} does not fit the layer spec")
            n = int(np.prod(shape)) * WEIGHT_DTYPE.itemsize
            if offset + n > len(payload):
                raise CheckpointTruncatedError("payload ends inside a weight tensor")
            arr = np.frombuffer(payload, dtype=WEIGHT_DTYPE, count=n // WEIGHT_DTYPE.itemsize, offset=offset)
            (weights if group == "weights" else buffers)[i][name] = arr.astype(np.float32).reshape(shape)
            offset += n
        for i in range(len(layers)):
            if weights[i].keys() != reference.weights[i].keys() or buffers[i].keys() != reference.buffers[i].keys():
                raise CheckpointShapeError(f"{entry['name']}[{i}]: missing tensors")
        subnets[entry["name"]] = nn.Network(layers, nn.NetworkParams(weights, buffers))
    if offset != len(payload) or offset != declared:
        raise CheckpointShapeError(f"payload holds {len(payload)} bytes but the tensors account for {offset}")

    obs_shape = tuple(desc["obs_shape"])
    try:
        if desc["kind"] == "policy":
            net = PolicyNet(*(subnets[n] for n in POLICY_PARTS), stored_actions, obs_shape)
        elif desc["kind"] == "classifier":
            net = ap.ClassifierNet(*(subnets[n] for n in CLASSIFIER_PARTS), stored_actions, obs_shape)
        else:
            raise CheckpointError(f"unknown network kind {desc['kind']!r}")
    except KeyError as exc:
        raise CheckpointShapeError(f"missing sub-network {exc}") from None
    except nn.ShapeError as exc:
        raise CheckpointShapeError(str(exc)) from None
    return net, dict(desc.get("meta", {}))


def _as_net(ckpt, kind: str):
    if isinstance(ckpt, (str, Path)):
        net, _ = load_checkpoint(ckpt, kind=kind)
        return net
    return ckpt.copy()


def adapt_classifier(ckpt, action_set: tuple[str, ...], tau: float = ap.DEFAULT_TAU) -> ap.ClassifierSource:
    """Wrap a trained classifier for a task that shares part of its action set.

    Shared actions are answered by the network. Target actions the classifier
    never saw get fresh one-hot inputs and are answered permissively until the
    classifier has been trained on them. Extra source actions are ignored.
    """
    net: ap.ClassifierNet = _as_net(ckpt, "classifier")
    action_set = tuple(action_set)
    shared = [a for a in action_set if a in net.action_set]
    if not shared:
        raise ap.ActionSetMismatch(f"no shared actions between {net.action_set} and {action_set}")
    new = tuple(a for a in action_set if a not in net.action_set)
    if new:
        net = net.expanded(action_set)
    return ap.ClassifierSource(net, action_set, tau, pending=new)


def warm_start(ckpt, action_set: tuple[str, ...] | None = None, shared_actions: bool = False,
               seed: int | np.random.Generator = 0) -> PolicyNet:
    """A policy initialised from a pre-trained one; the optimizer starts fresh.

    By default the action set must match exactly. With ``shared_actions`` the
    extractor and value head are copied, policy-head rows are copied for actions
    both sets share, and rows for the remaining actions are freshly initialised.
    """
    src: PolicyNet = _as_net(ckpt, "policy")
    if action_set is None or tuple(action_set) == src.action_set:
        return src
    action_set = tuple(action_set)
    if not shared_actions:
        raise ap.ActionSetMismatch(
            f"policy was trained on {len(src.action_set)} actions, target has {len(action_set)}")
    if not set(action_set) & set(src.action_set):
        raise ap.ActionSetMismatch("no shared actions")
    features = src.policy_head.layers[0].in_features
    head = nn.Network.create([nn.Dense(features, len(action_set))], seed)
    old = src.policy_head.params.weights[0]
    new = head.params.weights[0]
    for i, a in enumerate(action_set):
        if a in src.action_set:
            j = src.action_set.index(a)
            new["W"][i] = old["W"][j]
            new["b"][i] = old["b"][j]
    return PolicyNet(src.extractor, head, src.value_head, action_set, src.obs_shape)


def policy_reuse_sample(current: PolicyNet, expert: PolicyNet, psi: float, obs: np.ndarray,
                        mask: np.ndarray, rng: np.random.Generator) -> tuple[int, bool]:
    """Sample from the expert with probability ``psi``, else from ``current``.

    Both draws use the masked distribution over ``current``'s actions; expert
    actions are matched by name and actions the expert lacks get zero mass.
    Returns the action and whether the expert branch was taken.
    """
    if not 0.0 <= psi <= 1.0:
        raise ValueError(f"psi must lie in [0, 1], got {psi}")
    mask = np.asarray(mask, dtype=bool)
    use_expert = bool(rng.random() < psi)
    if use_expert:
        logits, _, _ = expert.forward(obs[None])
        z = np.full(current.n_actions, -np.inf)
        for i, a in enumerate(current.action_set):
            if a in expert.action_set:
                z[i] = logits[0, expert.action_set.index(a)]
    else:
        logits, _, _ = current.forward(obs[None])
        z = logits[0].astype(np.float64)
    p = ap.masked_distribution(z, mask)
    return int(rng.choice(len(p), p=p / p.sum())), use_expert
