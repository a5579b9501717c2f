"""Run the standard ablation sweeps and write one markdown and JSON table per parameter.

    python3 scripts/run_ablations.py --out runs/ablations --seeds 0,1,2
"""

import argparse
import json
import logging
from pathlib import Path

from hqclip.experiments import ablate

SWEEPS = {
    "alpha": [0.0, 0.5],
    "beta": [0.0, 10.0],
    "mix_ratio": [0.0, 0.25, 0.5, 0.75, 1.0],
    "strategy": ["random_segment", "full_long", "short_tags", "raw_only"],
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/ablations"))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--only", choices=sorted(SWEEPS), action="append", help="restrict to these parameters")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    seeds = [int(s) for s in args.seeds.split(",")]
    args.out.mkdir(parents=True, exist_ok=True)
    for param in args.only or SWEEPS:
        table = ablate(param, SWEEPS[param], seeds=seeds)
        (args.out / f"{param}.md").write_text(table.format() + "\n")
        (args.out / f"{param}.json").write_text(json.dumps(table.to_dict(), indent=2))
        print(f"\n## {param}\n\n{table.format()}")


if __name__ == "__main__":
    main()
