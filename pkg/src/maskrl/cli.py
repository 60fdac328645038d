"""``maskrl`` command line: run, compare, sweep, heatmap, prune-report, transfer.

Exit status is 0 on success, 1 when a run fails, 2 on a configuration error.
Settings may come from an INI file (``--config``) whose ``[experiment]``
section holds defaults and whose per-mode sections override them; flags given
on the command line win over both.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments as ex
from . import gridworld as gw
from . import transfer
from .applicability import ActionSetMismatch

log = logging.getLogger("maskrl")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ex.ConfigError(message)


def _seeds(text: str) -> str:
    try:
        [int(s) for s in text.split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    return text


def _common(p: argparse.ArgumentParser, mode: bool = True, checkpoint: bool = True) -> None:
    p.add_argument("--task", choices=sorted(gw.TASKS))
    if mode:
        p.add_argument("--mode", choices=ex.MODES)
    p.add_argument("--seeds", type=_seeds, help="comma-separated, e.g. 0,1,2,3,4")
    p.add_argument("--epsilon", help="mask-gate schedule: 0.5, linear:0.5,0.1,40 or piecewise:0.5;10=0.25")
    p.add_argument("--tau", type=float)
    p.add_argument("--steps", type=int, help="env-step budget per run")
    if checkpoint:
        p.add_argument("--checkpoint", help="checkpoint path; {seed} is replaced per seed")
    p.add_argument("--out", default="runs")
    p.add_argument("--config", help="INI file with [experiment] and per-mode sections")
    p.add_argument("--name")
    p.add_argument("--psi", type=float, help="expert probability for policy_reuse")
    p.add_argument("--partial-actions", help="comma-separated actions covered by partial knowledge")
    p.add_argument("--reuse", action="store_true", help="skip seeds whose metrics already exist")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskrl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("run", help="train one mode over several seeds"))
    _common(sub.add_parser("transfer", help="run a transfer mode from a checkpoint"))

    p = sub.add_parser("compare", help="summarize finished experiment directories")
    p.add_argument("experiments", nargs="+")
    p.add_argument("--out", help="write the summary CSV here instead of stdout")

    p = sub.add_parser("sweep", help="learn_classifier across several epsilons")
    _common(p, mode=False, checkpoint=False)

    p = sub.add_parser("heatmap", help="applicability heatmaps against the oracle")
    p.add_argument("--task", choices=sorted(gw.TASKS), required=True)
    p.add_argument("--checkpoint", help="classifier checkpoint; omit for the oracle")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", default="heatmaps")

    p = sub.add_parser("prune-report", help="pruned fraction per task")
    p.add_argument("--task", action="append", choices=sorted(gw.TASKS))
    p.add_argument("--out", help="write CSV here instead of stdout")
    return parser


def _experiment_config(args, mode: str | None = None) -> ex.ExperimentConfig:
    overrides = {
        "task": args.task, "mode": mode or getattr(args, "mode", None), "seeds": args.seeds,
        "epsilon": args.epsilon, "tau": args.tau, "max_env_steps": args.steps,
        "checkpoint": getattr(args, "checkpoint", None), "out_dir": args.out, "name": args.name,
        "psi": args.psi, "partial_actions": args.partial_actions,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ex.ConfigError(f"cannot read config: {exc}") from None
        return ex.config_from_ini(text, overrides)
    return ex.config_from_mapping(overrides)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    config = _experiment_config(args)
    if args.command == "transfer" and config.mode not in ex.CHECKPOINT_MODES:
        raise ex.ConfigError(f"transfer needs one of {ex.CHECKPOINT_MODES}, got {config.mode}")
    result = ex.run_experiment(config, reuse=args.reuse)
    print(f"{config.name}: {len(result.seed_files)} seeds -> {result.aggregate_file}")
    return EXIT_OK


def cmd_compare(args) -> int:
    results = [ex.load_experiment(d) for d in args.experiments]
    _emit(ex.summary_csv(ex.compare_modes(results)), args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.task:
        raise ex.ConfigError("sweep needs --task")
    text = args.epsilon or "0.1,0.25,0.5,0.75"
    try:
        epsilons = [float(e) for e in text.split(",")]
    except ValueError:
        raise ex.ConfigError(f"sweep --epsilon takes a comma-separated list, got {text!r}") from None
    args.epsilon = None
    base = _experiment_config(args, mode="learn_classifier")
    rows, _ = ex.epsilon_sweep(args.task, epsilons, base, reuse=args.reuse)
    table = ex.sweep_csv(rows)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / f"{args.task}_sweep.csv").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    source = ex.classifier_source_from_checkpoint(args.checkpoint, args.task, args.tau) if args.checkpoint else None
    mismatches = ex.emit_heatmaps(args.task, source, args.out, args.tau)
    print(f"{args.task}: {mismatches} mismatching cells against the oracle")
    return EXIT_OK


def cmd_prune(args) -> int:
    rows = ex.pruning_report(tuple(args.task) if args.task else None)
    _emit(ex.pruning_csv(rows), args.out)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "transfer": cmd_run, "compare": cmd_compare, "sweep": cmd_sweep,
            "heatmap": cmd_heatmap, "prune-report": cmd_prune}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ex.ConfigError as exc:
        print(f"maskrl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ex.ConfigError, ActionSetMismatch, transfer.CheckpointError, FileNotFoundError) as exc:
        print(f"maskrl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ex.ExperimentFailed, AssertionError) as exc:
        print(f"maskrl: run failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
