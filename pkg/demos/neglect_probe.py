"""Compare response perplexity under matching, mismatched and absent images.

An untrained model barely notices which image it is shown. After S-VCO
training the matching image gives the lowest perplexity, the mismatched
image the highest, and no image lands in between.

    python3 demos/neglect_probe.py
"""
import argparse

from vcontrast.evaluation import neglect_probe
from vcontrast.model import ModelParams
from vcontrast.synthetic import gen_corpus
from vcontrast.training import TrainConfig, _derive_seed, train


def show(label, report) -> None:
    m = report.means
    print(f"{label}: match<mismatch on {report.match_below_mismatch:.1%} of pairs; "
          f"mean ppl match {m['match']:.4g}, no image {m['noimage']:.4g}, mismatch {m['mismatch']:.4g}")


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=4)
    args = ap.parse_args()

    held_out = gen_corpus(1_000_000, 1000)
    show("untrained", neglect_probe(ModelParams.init(_derive_seed(args.seed, 0)), held_out))
    cfg = TrainConfig(objective="svco", learning_rate=1.0, epochs=args.epochs, seed=args.seed)
    _, policy = train(cfg, gen_corpus(args.seed, 2000))
    show("s-vco    ", neglect_probe(policy, held_out))


if __name__ == "__main__":
    main()
