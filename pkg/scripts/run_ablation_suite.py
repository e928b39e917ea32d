"""Train every ablation and readout variant on the long-range corpus and print a results table.

    python3 scripts/run_ablation_suite.py --epochs 8 --out runs/ablation
"""

import argparse
import logging
from dataclasses import asdict

from trasa import data as D
from trasa.train import TrainConfig, format_suite, run_ablation_suite


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-items", type=int, default=30)
    ap.add_argument("--train-sessions", type=int, default=2000)
    ap.add_argument("--test-sessions", type=int, default=500)
    ap.add_argument("--gap", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--d", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="directory for per-variant checkpoints")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    def corpus(n, seed):
        return D.final_item_instances(
            D.synthesize_long_range(args.n_items, n, gap=args.gap, min_len=args.gap + 1, max_len=args.gap + 5, seed=seed)
        )

    train_inst = corpus(args.train_sessions, 1)
    test_inst = corpus(args.test_sessions, 2)
    cfg = TrainConfig(d=args.d, num_heads=2, batch_size=64, max_epochs=args.epochs,
                      lr_decay_every_epochs=10, dropout=0.1, seed=args.seed)
    print("config:", asdict(cfg))
    results = run_ablation_suite(train_inst, test_inst, cfg, args.n_items, checkpoint_dir=args.out)
    print(format_suite(results))


if __name__ == "__main__":
    main()
