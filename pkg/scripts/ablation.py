"""Train each stage string on the synthetic set and report the loss trend.

    python scripts/ablation.py --steps 100 --canvas 224
"""

import argparse
import json
import time

import numpy as np

from asca import model as M
from asca import train as TR
from asca.augment import AugmentConfig
from asca.data import synthetic_spectrograms


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--archs", nargs="+", default=["C-C-C-T", "C-C-T-T", "C-C-C-C"])
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--canvas", type=int, default=224)
    ap.add_argument("--n", type=int, default=32)
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = synthetic_spectrograms(n=args.n, num_classes=args.classes, canvas=(args.canvas, args.canvas), seed=args.seed)
    aug = AugmentConfig(noise=False, freq_mask_max=args.canvas // 8, time_mask_max=args.canvas // 8)
    cfg = TR.TrainConfig(epochs=10_000, val_fraction=0.0, seed=args.seed, eval_every=10_000)
    for arch in args.archs:
        spec = M.parse_arch_spec(arch, num_classes=args.classes)
        start = time.perf_counter()
        res = TR.train(ds, spec, cfg, aug, max_steps=args.steps)
        losses = np.array(res.losses())
        smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
        final = TR.evaluate(spec, res.weights, ds)
        print(json.dumps({"arch": arch, "steps": len(losses), "finite": bool(np.isfinite(losses).all()),
                          "smoothed_first": float(smooth[0]), "smoothed_last": float(smooth[-1]),
                          "mAP": final.map, "top1": final.top1_accuracy,
                          "seconds": round(time.perf_counter() - start, 1)}))


if __name__ == "__main__":
    main()
