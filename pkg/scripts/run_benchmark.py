"""Run the default benchmark set and print the energy and velocity margins per preset."""
import argparse
import json
from dataclasses import replace
from pathlib import Path

from fracnsfp.cli_io import InitialCondition, load_config, orchestrate

BENCHMARKS = {
    "gaussian-bump-x": InitialCondition("gaussian-bump-x", 1.0, 1.0),
    "equilibrium": InitialCondition("equilibrium", 0.0, 0.0),
    "shear-mode": InitialCondition("shear-mode", 1.0, 0.0, radial=0.5),
    "anisotropic-q": InitialCondition("anisotropic-q", 0.0, 0.0, anisotropy=0.1),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="out/benchmarks")
    args = ap.parse_args()
    cfg = load_config(args.config)

    for name, init in BENCHMARKS.items():
        out = Path(args.out) / name
        code = orchestrate(replace(cfg, initial=init), "run", out)
        summary = json.loads((out / "summary.json").read_text())
        c = summary["criteria"]
        print(
            f"{name:16s} exit={code} energy_log10_margin={c['energy_inequality']['value']:.3g} "
            f"velocity_margin={c['velocity_energy_bound']['value']:.3g} mass_drift={c['mass_conservation']['value']:.2e}"
        )


if __name__ == "__main__":
    main()
