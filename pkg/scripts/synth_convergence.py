#!/usr/bin/env python3
"""End-to-end convergence experiment on the synthetic corpus.

Trains the synth-64 preset (dynamic sampling, 20 epochs, seed 7) with the
test split as a dev set, then reports final P@{1,3,5} and cluster recall
under both SWA and raw weights.
"""

import argparse
from dataclasses import replace

from xmc.predict import evaluate
from xmc.synth import corpus_datasets, make_synthetic_corpus
from xmc.trainer import TrainConfig, apply_preset, resolve_b_top, train


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--out-dir", default=None)
    args = parser.parse_args()

    corpus = make_synthetic_corpus(seed=args.seed)
    train_ds, test_ds, _ = corpus_datasets(corpus, max_len=16)
    config = apply_preset(TrainConfig(), "synth-64")
    config = replace(config, seed=args.seed)
    if args.epochs is not None:
        config = replace(config, epochs=args.epochs)

    bundle, metrics = train(train_ds, config, dev=test_ds, out_dir=args.out_dir)
    b_top = resolve_b_top(config, train_ds, bundle.cluster_map)
    print("final (swa):", evaluate(test_ds, [bundle], b_top=b_top, use_swa=True).machine_lines())
    print("final (raw):", evaluate(test_ds, [bundle], b_top=b_top, use_swa=False).machine_lines())
    first = metrics[0]["loss_g"] + metrics[0]["loss_d"]
    last = metrics[-1]["loss_g"] + metrics[-1]["loss_d"]
    print(f"train loss: epoch1={first:.3f} final={last:.3f} ratio={last / first:.3f}")


if __name__ == "__main__":
    main()
