"""Fit a 50-session Markov corpus until training P@1 reaches a target.

    python3 scripts/overfit_demo.py --target 0.95
"""

import argparse
import time
from collections import Counter, defaultdict

from trasa import data as D
from trasa.train import TrainConfig, evaluate, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-items", type=int, default=20)
    ap.add_argument("--sessions", type=int, default=50)
    ap.add_argument("--concentration", type=float, default=0.005)
    ap.add_argument("--target", type=float, default=0.95)
    ap.add_argument("--max-epochs", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    sessions = D.synthesize_markov(args.n_items, args.sessions, 3, 6, args.concentration, seed=args.seed)
    inst = [i for s in sessions for i in D.augment(s)]
    # identical prefixes with different labels cap the reachable P@1
    labels = defaultdict(Counter)
    for prefix, y in inst:
        labels[prefix][y] += 1
    ceiling = sum(max(c.values()) for c in labels.values()) / len(inst)
    print(f"instances={len(inst)} p1_ceiling={ceiling:.3f}")

    cfg = TrainConfig(d=32, num_heads=2, batch_size=32, max_epochs=args.max_epochs,
                      lr_decay_every_epochs=1000, dropout=0.0, weight_decay=0.0, seed=args.seed)
    start = time.perf_counter()

    def report(epoch, model, record):
        p1 = evaluate(model, inst, (1,)).precision[1]
        print(f"epoch={epoch} loss={record['loss']:.4f} train_P@1={p1:.3f} t={time.perf_counter() - start:.1f}s")
        return p1 >= args.target

    train(inst, cfg, args.n_items, on_epoch=report)


if __name__ == "__main__":
    main()
