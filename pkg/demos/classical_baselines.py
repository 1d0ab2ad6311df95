"""ART and StOMP on the two-tube test cases, scored with Dice, CNR and LE.

Noisy data and a few hundred ART sweeps. The 40 x 40 grid is the coarsest
on which the 1, 2 and 3 mm gaps rasterize to different voxel sets; at 24
or 32 voxels across, centre-point membership merges some of the cases.

    python demos/classical_baselines.py
"""
import warnings

from fmtrecon.forward import OpticalProps, SensorLayout, build_weight_matrix, simulate_measurements
from fmtrecon.geometry import GridSpec, Volume, case_phantom, rasterize_phantom
from fmtrecon.metrics import evaluate
from fmtrecon.solvers import SolverConfig, art_reconstruct, stomp_reconstruct

# StOMP's first stages select more voxels than there are independent rows
# and fall back to minimum-norm fits; it says so loudly on every phantom
warnings.simplefilter("ignore", RuntimeWarning)

grid = GridSpec.enclosing(40, 40, 8)
layout = SensorLayout.ring(src_angles=8, src_heights=2, det_angles=16, det_heights=4)
W = build_weight_matrix(grid, OpticalProps(), layout)

print(f"{'EED':>5} {'method':>6} {'Dice':>6} {'CNR':>8} {'LE1':>6} {'LE2':>6}")
for eed in (0.1, 0.2, 0.3):
    spec = case_phantom(eed)
    truth = rasterize_phantom(spec, grid)
    meas = simulate_measurements(W, truth, noise_level=0.01, seed=1)
    recons = {
        "art": art_reconstruct(W, meas.values, SolverConfig.art(iters=300, relax=0.5)).x,
        "stomp": stomp_reconstruct(W, meas.values, SolverConfig.stomp(iters=20, threshold=0.8)).x,
    }
    for method, x in recons.items():
        rep = evaluate(Volume.from_flat(x, grid), spec, method)
        print(f"{eed:5.1f} {method:>6} {rep.dice:6.3f} {rep.cnr:8.2f} {rep.le[0]:6.3f} {rep.le[1]:6.3f}")
