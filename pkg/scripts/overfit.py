"""Memorise 32 synthetic spectrograms with the desk model.

    python scripts/overfit.py --out runs/overfit
"""

import argparse
import json
import time

from asca import model as M
from asca import train as TR
from asca.augment import AugmentConfig
from asca.data import synthetic_spectrograms


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="C-C-C-T")
    ap.add_argument("--max-steps", type=int, default=300)
    ap.add_argument("--target", type=float, default=0.95, help="stop once train top-1 reaches this")
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="write metrics.jsonl and best.ckpt here")
    args = ap.parse_args()

    ds = synthetic_spectrograms(n=32, num_classes=4, seed=args.seed)
    spec = M.parse_arch_spec(args.arch, num_classes=4)
    cfg = TR.TrainConfig(lr0=args.lr, epochs=10_000, val_fraction=0.0, seed=args.seed)

    def report(rec):
        if rec["kind"] == "epoch":
            print(json.dumps(rec))
            return rec["acc"] >= args.target

    start = time.perf_counter()
    res = TR.train(ds, spec, cfg, AugmentConfig.identity(), out_dir=args.out, max_steps=args.max_steps,
                   on_step=report)
    final = TR.evaluate(spec, res.weights, ds)
    print(json.dumps({"steps": len(res.losses()), "top1": final.top1_accuracy, "mAP": final.map,
                      "seconds": round(time.perf_counter() - start, 1)}))


if __name__ == "__main__":
    main()
