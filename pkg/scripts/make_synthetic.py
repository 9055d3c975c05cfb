"""Regenerate the bundled synthetic study under data/synthetic/."""
import argparse
from pathlib import Path

from dbnlc.synthetic import write_synthetic_study

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "synthetic"))
    ap.add_argument("--seed", type=int, default=2021)
    args = ap.parse_args()
    write_synthetic_study(args.out, seed=args.seed)
    print(f"wrote {args.out}")
