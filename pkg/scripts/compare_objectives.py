"""Train every objective from scratch on the toy data and compare T2AV retrieval.

    python3 scripts/compare_objectives.py --seeds 42 7 1234 --out results/objectives.json
"""

import argparse
import json
import time
from pathlib import Path

from trialign import datagen, trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[42, 7, 1234])
    ap.add_argument("--kinds", nargs="+", default=list(trainer.LOSS_KINDS), choices=trainer.LOSS_KINDS)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--out", type=Path, default=Path("results/objectives.json"))
    args = ap.parse_args()

    split = datagen.generate_dataset(8000, 1000, seed=42, noise_level=0.05)
    rows = []
    for seed in args.seeds:
        for kind in args.kinds:
            cfg = trainer.TrainConfig(loss_kind=kind, seed=seed, steps=args.steps)
            start = time.perf_counter()
            res = trainer.train_run(cfg, split)
            m = trainer.evaluate(res.params, cfg, split).directions["T2AV"].metrics()
            rows.append({"seed": seed, "loss": kind, "seconds": time.perf_counter() - start, **m})
            print(f"seed {seed:>5} {kind:<13} R@1 {m['r1']:.3f}  R@10 {m['r10']:.3f}  nDCG@10 {m['ndcg10']:.3f}")

    print("\nmean over seeds")
    for kind in args.kinds:
        sel = [r for r in rows if r["loss"] == kind]
        print(f"  {kind:<13} R@1 {sum(r['r1'] for r in sel) / len(sel):.3f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
