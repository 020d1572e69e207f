"""Train one-sided VCO and S-VCO on a corpus with a style shortcut.

The rejected image carries a style marker during training. Once it is
stripped at evaluation time, the one-sided objective loses most of what
it seemed to learn while the symmetric one keeps it.

    python3 demos/shortcut.py --seed 0
"""
import argparse

from vcontrast.evaluation import pair_accuracy
from vcontrast.synthetic import gen_corpus, strip_shortcut
from vcontrast.training import TrainConfig, train


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=1.0)
    args = ap.parse_args()

    corpus = gen_corpus(args.seed, args.n, shortcut=True)
    with_marker = gen_corpus(10_000 + args.seed, 1000, shortcut=True)
    without_marker = strip_shortcut(with_marker)
    print(f"{'objective':>10} {'with marker':>12} {'marker removed':>15}")
    for objective in ("vco", "svco"):
        _, policy = train(TrainConfig(objective=objective, learning_rate=args.lr, seed=args.seed), corpus)
        print(f"{objective:>10} {pair_accuracy(policy, with_marker):>12.3f} "
              f"{pair_accuracy(policy, without_marker):>15.3f}")


if __name__ == "__main__":
    main()
