#!/usr/bin/env python3
"""Write the synthetic benchmark corpus to disk in the standard file layout.

Produces train.txt / test.txt (sparse, `N D L` header) and the aligned
train_raw.txt / test_raw.txt under --out-dir.
"""

import argparse
from pathlib import Path

from xmc.synth import make_synthetic_corpus


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", type=Path, required=True)
    parser.add_argument("--labels", type=int, default=64)
    parser.add_argument("--topics", type=int, default=8)
    parser.add_argument("--train", type=int, default=2000)
    parser.add_argument("--test", type=int, default=500)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    corpus = make_synthetic_corpus(
        num_labels=args.labels,
        num_topics=args.topics,
        n_train=args.train,
        n_test=args.test,
        seed=args.seed,
    )
    paths = corpus.write(args.out_dir)
    for name, path in paths.items():
        print(f"{name}: {path}")


if __name__ == "__main__":
    main()
