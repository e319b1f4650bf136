"""Compare the Galerkin q-marginal against the subordinated Langevin histogram."""
import argparse
from dataclasses import replace
from pathlib import Path

from fracnsfp.cli_io import load_config, fp_mc_benchmark

ap = argparse.ArgumentParser()
ap.add_argument("--config", default=None)
ap.add_argument("--out", default="out/mc")
ap.add_argument("--n-paths", type=int, default=None)
ap.add_argument("--seed", type=int, default=11)
args = ap.parse_args()

cfg = load_config(args.config)
if args.n_paths:
    cfg = replace(cfg, mc=replace(cfg.mc, n_paths=args.n_paths))
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
res = fp_mc_benchmark(cfg, out, seed=args.seed)
print(f"paths={res['n_paths']} flagged={res['flagged']} TV={res['tv']:.4f} (threshold {res['tv_threshold']})")
