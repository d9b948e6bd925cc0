"""How does one objective evaluation scale with the number of storeys?

Each evaluation is a full Kalman filter pass over the record. The augmented
state has 3n entries (displacements, velocities, one latent force per
floor), so dense covariance updates cost O(n^3) per step. Small systems are
dominated by fixed per-step overhead, so the measured slope sits below the
FLOP model.
"""
import argparse

from lfmtwin.cli import scale_bench

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--dofs", type=int, nargs="+", default=[1, 3, 5, 7])
parser.add_argument("--iterations", type=int, default=5)
parser.add_argument("--steps", type=int, default=2000)
args = parser.parse_args()

rep = scale_bench(args.dofs, args.iterations, n_steps=args.steps)
print(" n   state  median [ms]   model GFLOP")
for e in rep["entries"]:
    print(f"{e['n_dof']:2d}   {e['state_dim']:5d}  {1e3 * e['median_seconds']:10.2f}   {e['model_flops'] / 1e9:9.3f}")
if rep["slope"] is not None:
    print(f"log-log slope: wall-clock {rep['slope']:.2f}, FLOP model {rep['flop_slope']:.2f}")
