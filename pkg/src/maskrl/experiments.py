"""Experiment harness: seed fan-out, aggregation, mode comparison and reports.

Every experiment writes one directory::

    <out>/<name>/config.ini            resolved settings, defaults included
    <out>/<name>/seed_<s>/metrics.csv  per-iteration metrics
    <out>/<name>/seed_<s>/policy.ckpt  (and classifier.ckpt when one exists)
    <out>/<name>/seed_<s>/classifier_best.ckpt  snapshot at peak exhaustive accuracy
    <out>/<name>/aggregate.csv         mean and standard error on the env-step grid

Curves are aligned on a fixed grid of ``GRID_STEP`` env steps by linear
interpolation. Grid points before a run's first record carry no value; past a
run's last record (early stop) the final value is held.
"""
from __future__ import annotations

import configparser
import csv
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import applicability as ap
from . import gridworld as gw
from . import trainer as tr
from . import transfer

GRID_STEP = 1000
REWARD_TARGET = 0.9
FINAL_WINDOW = 10
AGG_METRICS = ("mean_reward_norm", "mean_inapplicable_per_episode", "classifier_loss",
               "classifier_accuracy", "epsilon", "zero_mask_fallbacks")

MODES = ("baseline_ppo", "full_knowledge", "partial_knowledge", "partial_classifier",
         "learn_classifier", "transfer_classifier", "warm_start", "policy_reuse")
CHECKPOINT_MODES = ("transfer_classifier", "warm_start", "policy_reuse")
DEFAULT_EPSILON = {
    "baseline_ppo": 0.0, "full_knowledge": 1.0, "partial_knowledge": 0.5, "partial_classifier": 0.5,
    "learn_classifier": 0.5, "transfer_classifier": 0.25, "warm_start": 0.0, "policy_reuse": 0.0,
}
DEFAULT_PARTIAL = {
    "doorkey1": gw.MOVE_ACTIONS, "doorkey2": gw.MOVE_ACTIONS,
    "xisland1": ("up", "down"), "xisland2": ("up", "down"), "maze": ("up", "down"),
}
TRANSFER_CLASSIFIER_LR = 1e-4
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class ExperimentFailed(RuntimeError):
    """A seed's run aborted; outputs written so far are kept (CLI exit code 1)."""


@dataclass
class ExperimentConfig:
    task: str
    mode: str
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    out_dir: str = "runs"
    name: str | None = None
    epsilon: str | None = None
    tau: float = ap.DEFAULT_TAU
    max_env_steps: int = 100_000
    n_steps: int = 2048
    epochs: int = 10
    n_workers: int = 1
    partial_actions: tuple[str, ...] | None = None
    checkpoint: str | None = None
    psi: float = 0.25
    classifier_lr: float | None = None
    early_stop_window: int = 10
    save_checkpoints: bool = True

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.task not in gw.TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {sorted(gw.TASKS)}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {self.seeds}")
        if self.mode in CHECKPOINT_MODES and not self.checkpoint:
            raise ConfigError(f"mode {self.mode} needs a checkpoint")
        if self.partial_actions is not None:
            self.partial_actions = tuple(self.partial_actions)
        if self.name is None:
            self.name = f"{self.task}_{self.mode}"
        try:
            for seed in self.seeds[:1]:
                self.trainer_config(seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def checkpoint_for(self, seed: int) -> str | None:
        """``checkpoint`` with any ``{seed}`` placeholder filled in."""
        return None if self.checkpoint is None else self.checkpoint.format(seed=seed)

    def trainer_config(self, seed: int) -> tr.TrainerConfig:
        mode = self.mode
        eps = self.epsilon if self.epsilon is not None else repr(DEFAULT_EPSILON[mode])
        knowledge = tr.KnowledgeConfig()
        train = False
        kwargs = {}
        lr = self.classifier_lr
        if mode == "full_knowledge":
            knowledge = tr.KnowledgeConfig(oracle=True)
        elif mode in ("partial_knowledge", "partial_classifier"):
            partial = self.partial_actions if self.partial_actions is not None else DEFAULT_PARTIAL[self.task]
            knowledge = tr.KnowledgeConfig(partial_actions=partial, classifier=mode == "partial_classifier")
            train = mode == "partial_classifier"
        elif mode == "learn_classifier":
            knowledge = tr.KnowledgeConfig(classifier=True)
            train = True
        elif mode == "transfer_classifier":
            knowledge = tr.KnowledgeConfig(classifier=True, classifier_checkpoint=self.checkpoint_for(seed))
            train = True
            lr = TRANSFER_CLASSIFIER_LR if lr is None else lr
        elif mode == "warm_start":
            kwargs = {"warm_start_checkpoint": self.checkpoint_for(seed), "warm_start_shared_actions": True}
        elif mode == "policy_reuse":
            kwargs = {"expert_checkpoint": self.checkpoint_for(seed), "psi": self.psi}
        return tr.TrainerConfig(
            task=self.task, seed=seed, epsilon=tr.parse_schedule(eps), tau=self.tau, knowledge=knowledge,
            train_classifier=train, n_workers=self.n_workers, n_steps=self.n_steps, epochs=self.epochs,
            max_env_steps=self.max_env_steps, classifier_lr=lr if lr is not None else 3e-4,
            early_stop_window=self.early_stop_window, **kwargs)

    def to_ini(self) -> str:
        """Resolved settings; the trainer section shows every default actually used."""
        cp = configparser.ConfigParser(interpolation=None)
        cp["experiment"] = {f.name: _ini_value(getattr(self, f.name)) for f in fields(self)}
        tc = self.trainer_config(self.seeds[0]).to_dict()
        tc.pop("seed")
        cp["trainer"] = {k: _ini_value(v) for k, v in _flatten(tc).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def _ini_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def config_from_ini(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Build a config from INI text: ``[experiment]`` then a section named after the mode.

    Later sources win: ``[experiment]``, ``[<mode>]``, then ``overrides``.
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    values: dict[str, str] = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    mode = values.get("mode")
    if mode and cp.has_section(mode):
        merged = dict(cp[mode])
        merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
        values.update(merged)
    return config_from_mapping(values)


def config_from_mapping(values: dict) -> ExperimentConfig:
    known = {f.name: f for f in fields(ExperimentConfig)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    kwargs = {}
    for k, v in values.items():
        if isinstance(v, str):
            v = v.strip()
            if v == "":
                continue
        try:
            kwargs[k] = _coerce(k, v)
        except ValueError as exc:
            raise ConfigError(f"bad value for {k!r}: {v!r} ({exc})") from None
    if "task" not in kwargs or "mode" not in kwargs:
        raise ConfigError("config needs both 'task' and 'mode'")
    return ExperimentConfig(**kwargs)


def _coerce(key: str, v):
    if not isinstance(v, str):
        return v
    if key == "seeds":
        return tuple(int(x) for x in v.replace(" ", "").split(",") if x)
    if key == "partial_actions":
        return tuple(x.strip() for x in v.split(",") if x.strip())
    if key in ("tau", "psi", "classifier_lr"):
        return float(v)
    if key in ("max_env_steps", "n_steps", "epochs", "n_workers", "early_stop_window"):
        return int(v)
    if key == "save_checkpoints":
        return v.lower() in ("1", "true", "yes", "on")
    return v


# ---------------------------------------------------------------------------
# running

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    directory: Path
    seed_files: list[Path]
    aggregate_file: Path
    runs: dict[int, list[dict[str, float]]] = field(repr=False)


def seed_dir(config: ExperimentConfig, seed: int) -> Path:
    return Path(config.out_dir) / config.name / f"seed_{seed}"


def run_seed(config: ExperimentConfig, seed: int) -> Path:
    """Train one seed and write its metrics (and checkpoints); returns the metrics path."""
    out = seed_dir(config, seed)
    out.mkdir(parents=True, exist_ok=True)
    tconf = config.trainer_config(seed)
    path = out / "metrics.csv"
    state = tr.TrainerState(tconf)
    try:
        result = tr.run(tconf, state)
    except tr.TrainingAborted as exc:
        tr.write_metrics(path, state.metrics)
        tr.dump_state(out / "abort_state.json", exc.dump)
        raise ExperimentFailed(f"{config.name} seed {seed}: {exc}") from exc
    tr.write_metrics(path, result.metrics)
    if config.save_checkpoints:
        meta = {"task": config.task, "mode": config.mode, "seed": seed, "env_steps": state.env_steps}
        transfer.save_checkpoint(result.policy, out / "policy.ckpt", meta)
        if result.classifier is not None:
            transfer.save_checkpoint(result.classifier, out / "classifier.ckpt", meta)
        if result.best_classifier is not None:
            best_meta = {**meta, "accuracy": state.best_accuracy}
            transfer.save_checkpoint(result.best_classifier, out / "classifier_best.ckpt", best_meta)
    return path


def run_experiment(config: ExperimentConfig, reuse: bool = False) -> ExperimentResult:
    """One run per seed, then the aggregate; ``reuse`` skips seeds already on disk."""
    directory = Path(config.out_dir) / config.name
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.ini").write_text(config.to_ini())
    files = []
    for seed in config.seeds:
        path = seed_dir(config, seed) / "metrics.csv"
        if not (reuse and path.exists() and not (path.parent / "abort_state.json").exists()):
            path = run_seed(config, seed)
        files.append(path)
    agg = directory / "aggregate.csv"
    write_aggregate(agg, files)
    return ExperimentResult(config, directory, files, agg, {s: tr.read_metrics(f) for s, f in zip(config.seeds, files)})


def load_experiment(directory: str | Path) -> ExperimentResult:
    """Re-open a finished experiment directory."""
    directory = Path(directory)
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(directory / "config.ini")
    config = config_from_mapping(dict(cp["experiment"]))
    files = [seed_dir(config, s) / "metrics.csv" for s in config.seeds]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise ExperimentFailed(f"missing seed outputs: {missing}")
    return ExperimentResult(config, directory, files, directory / "aggregate.csv",
                            {s: tr.read_metrics(f) for s, f in zip(config.seeds, files)})


# ---------------------------------------------------------------------------
# aggregation

def make_grid(last_step: float, step: int = GRID_STEP, first_step: float = GRID_STEP) -> np.ndarray:
    """Multiples of ``step`` from the first one at or after ``first_step`` to the first at or after ``last_step``."""
    start = max(step, int(np.ceil(first_step / step)) * step)
    stop = max(start, int(np.ceil(last_step / step)) * step)
    return np.arange(start, stop + 1, step, dtype=np.int64)


def interpolate(rows: list[dict[str, float]], metric: str, grid: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``metric`` onto ``grid``; NaN before the first record."""
    x = np.array([r["env_steps"] for r in rows])
    y = np.array([r[metric] for r in rows])
    out = np.interp(grid, x, y, left=np.nan, right=y[-1])
    return out


def aggregate(runs: list[list[dict[str, float]]], grid: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Mean and standard error (sample stdev over sqrt(n)) per metric on the grid."""
    if not runs:
        raise ValueError("nothing to aggregate")
    if grid is None:
        grid = make_grid(max(r[-1]["env_steps"] for r in runs), first_step=min(r[0]["env_steps"] for r in runs))
    out = {"env_steps": grid}
    n = len(runs)
    for m in AGG_METRICS:
        curves = np.stack([interpolate(r, m, grid) for r in runs])
        with np.errstate(invalid="ignore"):
            mean = curves.mean(axis=0)
            se = curves.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
        if n == 1:
            se = np.where(np.isnan(mean), np.nan, 0.0)
        out[f"{m}_mean"] = mean
        out[f"{m}_se"] = se
    return out


def aggregate_csv(files: list[Path]) -> str:
    runs = [tr.read_metrics(f) for f in files]
    agg = aggregate(runs)
    cols = ["env_steps"] + [f"{m}_{s}" for m in AGG_METRICS for s in ("mean", "se")]
    buf = io.StringIO()
    for f in files:
        buf.write(f"# source: {Path(f).as_posix()}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for i in range(len(agg["env_steps"])):
        writer.writerow([int(agg["env_steps"][i])] + [tr._fmt(float(agg[c][i])) for c in cols[1:]])
    return buf.getvalue()


def write_aggregate(path: str | Path, files: list[Path]) -> None:
    Path(path).write_text(aggregate_csv(files))


def read_aggregate(path: str | Path) -> tuple[list[str], dict[str, np.ndarray]]:
    """(source files, columns) of an aggregate CSV."""
    lines = Path(path).read_text().splitlines()
    sources = [l[len("# source: "):] for l in lines if l.startswith("# source: ")]
    body = [l for l in lines if not l.startswith("#")]
    reader = csv.reader(body)
    header = next(reader)
    data = np.array([[float(v) for v in row] for row in reader]).reshape(-1, len(header))
    return sources, {h: data[:, i] for i, h in enumerate(header)}


# ---------------------------------------------------------------------------
# comparison

def steps_to_target(rows: list[dict[str, float]], grid: np.ndarray, target: float = REWARD_TARGET) -> float:
    """First grid step where the interpolated reward reaches ``target`` (inf if never)."""
    curve = interpolate(rows, "mean_reward_norm", grid)
    hit = np.nonzero(curve >= target)[0]
    return float(grid[hit[0]]) if len(hit) else float("inf")


def final_value(rows: list[dict[str, float]], metric: str, window: int = FINAL_WINDOW) -> float:
    return float(np.mean([r[metric] for r in rows[-window:]]))


@dataclass
class ModeSummary:
    name: str
    mode: str
    task: str
    steps_to_target: float
    per_seed_steps: tuple[float, ...]
    final_reward: float
    final_inapplicable: float
    rank: int = 0


def common_grid(results: list[ExperimentResult], step: int = GRID_STEP) -> np.ndarray:
    runs = [rows for res in results for rows in res.runs.values()]
    return make_grid(max(r[-1]["env_steps"] for r in runs), step, min(r[0]["env_steps"] for r in runs))


def summarize(result: ExperimentResult, grid: np.ndarray, target: float = REWARD_TARGET) -> ModeSummary:
    runs = list(result.runs.values())
    steps = tuple(steps_to_target(r, grid, target) for r in runs)
    return ModeSummary(
        name=result.config.name, mode=result.config.mode, task=result.config.task,
        steps_to_target=float(np.median(steps)), per_seed_steps=steps,
        final_reward=float(np.mean([final_value(r, "mean_reward_norm") for r in runs])),
        final_inapplicable=float(np.mean([final_value(r, "mean_inapplicable_per_episode") for r in runs])),
    )


def compare_modes(results: list[ExperimentResult], target: float = REWARD_TARGET,
                  grid: np.ndarray | None = None, allow_mixed_tasks: bool = False) -> list[ModeSummary]:
    """Median steps-to-target, final reward and inapplicable count per experiment, ranked.

    Every experiment is evaluated on one shared grid. Equal medians share a rank.
    """
    if not results:
        raise ValueError("nothing to compare")
    tasks = {r.config.task for r in results}
    if len(tasks) > 1 and not allow_mixed_tasks:
        raise ConfigError(f"compare_modes needs a single task, got {sorted(tasks)}")
    if grid is None:
        grid = common_grid(results)
    elif len(grid) > 1 and len(set(np.diff(grid))) != 1:
        raise ConfigError("misaligned grid: steps are not evenly spaced")
    summaries = [summarize(r, grid, target) for r in results]
    ordered = sorted({s.steps_to_target for s in summaries})
    for s in summaries:
        s.rank = ordered.index(s.steps_to_target) + 1
    return sorted(summaries, key=lambda s: (s.rank, s.name))


SUMMARY_COLUMNS = ("rank", "name", "mode", "task", "median_steps_to_target", "final_reward",
                   "final_inapplicable", "per_seed_steps")


def summary_csv(summaries: list[ModeSummary]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for s in summaries:
        writer.writerow([s.rank, s.name, s.mode, s.task, tr._fmt(s.steps_to_target), tr._fmt(s.final_reward),
                         tr._fmt(s.final_inapplicable), " ".join(tr._fmt(x) for x in s.per_seed_steps)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# epsilon sweep

@dataclass
class SweepRow:
    epsilon: float
    steps_to_target: float
    final_reward: float
    flagged: bool


def epsilon_sweep(task: str, epsilons: list[float], base: ExperimentConfig | None = None,
                  reuse: bool = False) -> tuple[list[SweepRow], list[ExperimentResult]]:
    """``learn_classifier`` once per epsilon; flags any epsilon whose final reward is below target."""
    for e in epsilons:
        if not 0.0 <= e <= 1.0:
            raise ConfigError(f"epsilon {e} outside [0, 1]")
    results = []
    for e in epsilons:
        kw = {f.name: getattr(base, f.name) for f in fields(ExperimentConfig)} if base else {}
        kw.update(task=task, mode="learn_classifier", epsilon=repr(float(e)), name=f"{task}_sweep_eps{e:g}")
        results.append(run_experiment(ExperimentConfig(**kw), reuse=reuse))
    grid = common_grid(results)
    rows = []
    for e, res in zip(epsilons, results):
        s = summarize(res, grid)
        rows.append(SweepRow(float(e), s.steps_to_target, s.final_reward, s.final_reward < REWARD_TARGET))
    return rows, results


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epsilon", "median_steps_to_target", "final_reward", "flagged"])
    for r in rows:
        writer.writerow([tr._fmt(r.epsilon), tr._fmt(r.steps_to_target), tr._fmt(r.final_reward), int(r.flagged)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# heatmaps and pruning

def heatmap_name(task: str, action: str, has_key: bool, door_open: bool, tag: str) -> str:
    return f"{task}_{action}_key{int(has_key)}_door{int(door_open)}_{tag}.csv"


def emit_heatmaps(task: str, source: ap.KnowledgeSource | None, out_dir: str | Path,
                  tau: float | None = None) -> int:
    """Write source and oracle heatmaps for every action and flag context.

    ``None`` uses the oracle itself. Returns the number of cells where the
    source disagrees with the oracle; disagreement is reported, not raised.
    """
    spec = gw.make_task(task)
    oracle = ap.OracleSource(spec)
    source = source if source is not None else oracle
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mismatches = 0
    for a, name in enumerate(spec.action_set):
        for has_key, door_open in ap.flag_contexts(spec):
            got = ap.heatmap(source, spec, a, tau, has_key, door_open)
            truth = ap.heatmap(oracle, spec, a, None, has_key, door_open)
            ap.write_heatmap_csv(out / heatmap_name(task, name, has_key, door_open, "source"), got)
            ap.write_heatmap_csv(out / heatmap_name(task, name, has_key, door_open, "oracle"), truth)
            mismatches += int((got != truth).sum())
    return mismatches


def classifier_source_from_checkpoint(path: str | Path, task: str, tau: float = ap.DEFAULT_TAU) -> ap.ClassifierSource:
    spec = gw.make_task(task)
    return transfer.adapt_classifier(path, spec.action_set, tau)


@dataclass
class PruningRow:
    task: str
    n_states: int
    n_actions: int
    pruned_fraction: float


def pruning_report(tasks: tuple[str, ...] | None = None) -> list[PruningRow]:
    """Exact pruned fraction per task; insists on Key&Door(1) pruning more than X-Island(1)."""
    tasks = tuple(gw.TASKS) if tasks is None else tuple(tasks)
    rows = []
    for t in tasks:
        spec = gw.make_task(t)
        states = gw.enumerate_states(spec)
        frac = float(1.0 - gw.applicability_table(spec, states).mean())
        rows.append(PruningRow(t, len(states), spec.n_actions, frac))
    by = {r.task: r.pruned_fraction for r in rows}
    if "doorkey1" in by and "xisland1" in by and not by["doorkey1"] > by["xisland1"]:
        raise AssertionError(f"expected doorkey1 ({by['doorkey1']:.3f}) to prune more than xisland1 ({by['xisland1']:.3f})")
    return rows


def pruning_csv(rows: list[PruningRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task", "n_states", "n_actions", "pruned_fraction"])
    for r in rows:
        writer.writerow([r.task, r.n_states, r.n_actions, tr._fmt(r.pruned_fraction)])
    return buf.getvalue()
