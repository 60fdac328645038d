"""Walk through action-applicability masking on the Maze task.

Run with ``python demos/masking_walkthrough.py [--steps N]``. It prints the
oracle's view of the maze, shows how a mask reshapes a policy distribution,
then trains a policy jointly with an applicability classifier and draws the
learned "up" heatmap next to the true one.
"""
from __future__ import annotations

import argparse

import numpy as np

from maskrl import applicability as ap
from maskrl import gridworld as gw
from maskrl import trainer as tr

SYMBOLS = {ap.APPLICABLE: ".", ap.INAPPLICABLE: "x", ap.NOT_A_CELL: "#"}


def draw(grid: np.ndarray) -> str:
    return "\n".join("".join(SYMBOLS[int(v)] for v in row) for row in grid)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=20_480, help="env-step budget for the training run")
    args = parser.parse_args()

    spec = gw.make_task("maze")
    print(spec.layout.to_text())
    print(f"\n{gw.pruned_fraction(spec):.1%} of (state, action) pairs are inapplicable in the maze\n")

    logits = np.array([2.0, 1.0, 0.0, -1.0])
    mask = np.array([True, False, True, True])
    print("policy      ", np.round(ap.masked_distribution(logits, np.ones(4, bool)), 4))
    print("with mask   ", np.round(ap.masked_distribution(logits, mask), 4), "(action 1 removed)\n")

    up = spec.action_index("up")
    oracle = ap.OracleSource(spec)
    print("oracle: where 'up' changes the state (x = bumps a wall)")
    print(draw(ap.heatmap(oracle, spec, up)), "\n")

    cfg = tr.TrainerConfig(task="maze", seed=0, max_env_steps=args.steps, epsilon=tr.Constant(0.5),
                           knowledge=tr.KnowledgeConfig(classifier=True), train_classifier=True)
    result = tr.run(cfg)
    for row in result.metrics:
        print(f"iter {row.iteration:2d}  steps {row.env_steps:6d}  reward {row.mean_reward_norm:.3f}  "
              f"wasted actions/episode {row.mean_inapplicable_per_episode:5.2f}  "
              f"classifier accuracy {row.classifier_accuracy:.3f}")

    learned = ap.ClassifierSource(result.best_classifier)
    print("\nlearned classifier (best snapshot): 'up'")
    print(draw(ap.heatmap(learned, spec, up)))
    print(f"exhaustive accuracy {ap.exhaustive_accuracy(learned, spec):.3f}")


if __name__ == "__main__":
    main()
