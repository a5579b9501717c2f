"""Compare analytic gradients of the full training objective against central differences.

    python3 scripts/check_gradients.py --instances 20
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from oracles import central_differences, max_relative_error  # noqa: E402

from hqclip.trainer import TrainConfig, objective  # noqa: E402
from test_acceptance import _grad_instance  # noqa: E402


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--instances", type=int, default=20)
    ap.add_argument("--h", type=float, default=1e-4)
    args = ap.parse_args(argv)

    cfg = TrainConfig()
    errs = []
    for seed in range(args.instances):
        p, batch = _grad_instance(seed)
        _, g = objective(p, batch, cfg)
        num = central_differences(lambda: objective(p, batch, cfg)[0].l_total, p.arrays(), h=args.h)
        errs.append(max_relative_error(g.arrays(), num))
        print(f"instance {seed:2d}  max rel err {errs[-1]:.2e}")
    print(f"worst {max(errs):.2e}  median {float(np.median(errs)):.2e}")
    return 0 if max(errs) < 1e-4 else 1


if __name__ == "__main__":
    sys.exit(main())
