"""Print the discrete kernel identity residuals with observed orders."""
import argparse

from fracnsfp.fractional_kernels import identity_suite, identity_verdicts

ap = argparse.ArgumentParser()
ap.add_argument("--alphas", type=float, nargs="+", default=[0.6, 0.75, 0.9])
ap.add_argument("--dts", type=float, nargs="+", default=[1e-2, 1e-3])
ap.add_argument("--t-cut", type=float, default=0.1)
args = ap.parse_args()

rows = identity_suite(tuple(args.alphas), tuple(args.dts), args.t_cut)
print(f"{'identity':30s} {'alpha':>6s} {'dt':>8s} {'residual':>12s}")
for name, a, dt, r in rows:
    print(f"{name:30s} {a:6.3f} {dt:8.0e} {r:12.4e}")
print()
for v in identity_verdicts(rows):
    flag = "ok" if v["tolerance_ok"] and v["order_ok"] else "FAIL"
    print(f"{v['identity']:30s} alpha={v['alpha']:.2f} observed order={v['order']:.3f} {flag}")
