"""Generate data, run a config's grid, then summarise the Pareto fronts.

    python scripts/run_experiment.py configs/e2e.yaml runs/e2e --workers 2
    python scripts/run_experiment.py configs/full_grid.yaml runs/full --seeds 0
"""
import argparse
import json
import sys
from pathlib import Path

from onda.cli import main


def step(*argv: str):
    code = main(list(argv))
    if code:
        sys.exit(f"step {argv[0]} exited with {code}")


def table(pareto_dir: Path):
    rows = (pareto_dir / "pareto.csv").read_text().strip().split("\n")
    head = rows[0].split(",")
    pick = [head.index(k) for k in ("variant", "arch", "offline_ratio", "online_ratio", "size", "accuracy", "pareto")]
    print(f"{'variant':<17}{'arch':<11}{'off':>5}{'on':>6}{'size':>10}{'acc':>8}  front")
    for line in rows[1:]:
        v = line.split(",")
        variant, arch, off, on, size, acc, front = (v[i] for i in pick)
        print(f"{variant:<17}{arch:<11}{off:>5}{on or '-':>6}{float(size):>10.0f}{float(acc):>8.3f}  {front}")
    for arch, entry in json.loads((pareto_dir / "summary.json").read_text()).items():
        iso = entry.get("iso_compression")
        print(f"{arch}: iso-performance compression " + (f"{iso:.2f}x" if iso else entry.get("note", "n/a")))


def run():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("config")
    ap.add_argument("out")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seeds", help="comma-separated seeds, overrides grid.seeds")
    args = ap.parse_args()
    out = Path(args.out)
    data = out / "data"
    if not (data / "dataset.onda").exists():
        step("gen-data", "--config", args.config, "--out", str(data))
    grid = ["grid", "--config", args.config, "--data", str(data / "dataset.onda"), "--out", str(out / "grid"),
            "--workers", str(args.workers)]
    step(*grid, *(["--seeds", args.seeds] if args.seeds else []))
    step("pareto", str(out / "grid" / "reports"), "--out", str(out / "pareto"))
    table(out / "pareto")


if __name__ == "__main__":
    run()
