"""Carry a Maze applicability classifier over to the Key & Door task.

Run with ``python demos/transfer_walkthrough.py [--steps N]``. A classifier
learned in the maze only knows the four moves; in Key & Door it answers for
those and keeps ``pickup`` and ``open`` unmasked until it has seen them.
"""
from __future__ import annotations

import argparse
import tempfile
from pathlib import Path

from maskrl import applicability as ap
from maskrl import gridworld as gw
from maskrl import trainer as tr
from maskrl import transfer


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=10_240, help="env-step budget for each run")
    args = parser.parse_args()

    learn = tr.TrainerConfig(task="maze", seed=0, max_env_steps=args.steps, epsilon=tr.Constant(0.5),
                             knowledge=tr.KnowledgeConfig(classifier=True), train_classifier=True)
    source_run = tr.run(learn)
    print(f"maze classifier accuracy {source_run.state.best_accuracy:.3f}")

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "maze_classifier.ckpt"
        transfer.save_checkpoint(source_run.best_classifier, ckpt, {"task": "maze"})

        door = gw.make_task("doorkey1")
        adapted = transfer.adapt_classifier(ckpt, door.action_set)
        print(f"actions the maze never saw (left unmasked for now): {sorted(adapted.pending)}")
        print(f"zero-shot exhaustive accuracy on Key & Door: {ap.exhaustive_accuracy(adapted, door):.3f}")

        for label, knowledge, lr in [
            ("from scratch", tr.KnowledgeConfig(classifier=True), 3e-4),
            ("transferred ", tr.KnowledgeConfig(classifier=True, classifier_checkpoint=str(ckpt)), 1e-4),
        ]:
            cfg = tr.TrainerConfig(task="doorkey1", seed=0, max_env_steps=args.steps, epsilon=tr.Constant(0.5),
                                   knowledge=knowledge, train_classifier=True, classifier_lr=lr)
            rows = tr.run(cfg).metrics
            curve = " ".join(f"{r.mean_reward_norm:.2f}" for r in rows)
            print(f"{label} reward per iteration: {curve}")


if __name__ == "__main__":
    main()
