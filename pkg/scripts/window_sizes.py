"""Forward the desk model at every supported window size and time it.

    python scripts/window_sizes.py --arch C-C-T-T
"""

import argparse
import json
import time

from asca import model as M
from asca.data import synthetic_spectrograms
from asca.tensor import Tensor, no_grad


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="C-C-C-T")
    ap.add_argument("--canvas", type=int, default=224)
    ap.add_argument("--batch", type=int, default=2)
    args = ap.parse_args()

    x = Tensor(synthetic_spectrograms(n=args.batch, num_classes=4, canvas=(args.canvas, args.canvas)).inputs)
    for window in M.WINDOW_SIZES:
        spec = M.parse_arch_spec(args.arch, num_classes=4, window=window)
        w = M.init_weights(spec, 0)
        start = time.perf_counter()
        with no_grad():
            out = M.model_forward(x, spec, w)
        print(json.dumps({"window": window, "logits": list(out.shape), "parameters": w.num_parameters(),
                          "seconds": round(time.perf_counter() - start, 2)}))


if __name__ == "__main__":
    main()
