"""Run the full pipeline on a study config and print the forecast table."""
import argparse
import sys
from pathlib import Path

from dbnlc import cli

if __name__ == "__main__":
    here = Path(__file__).resolve().parents[1]
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(here / "data" / "synthetic" / "config.json"))
    ap.add_argument("--out", default=str(here / "runs" / "synthetic"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    code = cli.main(["run", "--config", args.config, "--out", args.out,
                     "--seed", str(args.seed), "--workers", str(args.workers)])
    if code == 0:
        print((Path(args.out) / "report.txt").read_text())
    sys.exit(code)
