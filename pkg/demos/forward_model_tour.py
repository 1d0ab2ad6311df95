"""Walk through the optical forward model on a small grid.

Builds the diffusion operator, solves for one source field, assembles the
normalized Born weight matrix, simulates noisy surface readings for a
two-tube phantom and encodes them into condition images.

    python demos/forward_model_tour.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from fmtrecon.forward import (OpticalProps, SensorLayout, assemble_diffusion_operator, build_weight_matrix,
                              encode_condition_images, injection_voxels, simulate_measurements, solve_field)
from fmtrecon.geometry import GridSpec, case_phantom, rasterize_phantom

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/forward")
out.mkdir(parents=True, exist_ok=True)

grid = GridSpec.enclosing(24, 24, 8)
props = OpticalProps()
layout = SensorLayout.ring(src_angles=8, src_heights=1, det_angles=16, det_heights=4)
print(f"grid {grid.shape} (z, y, x), pitch {grid.dx:.3f} cm; D = {props.D:.4f} cm")

# one excitation field, to see how quickly light dies off in tissue
op = assemble_diffusion_operator(grid, props, 1.5, 1.5)
src = injection_voxels(layout.sources[:1], grid, props, 1.5, 1.5)[0]
rhs = np.zeros(grid.size)
rhs[src] = 1.0 / grid.voxel_volume
field = solve_field(op, rhs).reshape(grid.shape)
mid = field[grid.nz // 2]
print(f"source field: peak {field.max():.3e}, value at the far side {mid[grid.ny // 2, 1]:.3e}")
log_img = np.log10(np.maximum(mid, mid.max() * 1e-8))
log_img = (log_img - log_img.min()) / np.ptp(log_img)
Image.fromarray(np.rint(log_img * 255).astype(np.uint8)).resize((240, 240)).save(out / "source_field_log.png")

W = build_weight_matrix(grid, props, layout)
print(f"W: {W.shape[0]} source-detector pairs x {W.shape[1]} voxels, {W.matrix.nnz} nonzeros")

spec = case_phantom(0.2)
truth = rasterize_phantom(spec, grid)
meas = simulate_measurements(W, truth, noise_level=0.01, seed=7)
print(f"measurements: {meas.values.size} readings, range {meas.values.min():.3e} .. {meas.values.max():.3e}")

cond = encode_condition_images(meas, layout, num=4, n=grid.nx)
strip = np.concatenate(list(cond), axis=1)
Image.fromarray(np.rint(strip * 255).astype(np.uint8)).resize((strip.shape[1] * 8, strip.shape[0] * 8),
                                                               Image.NEAREST).save(out / "condition_views.png")
print(f"condition stack {cond.shape}; images written to {out}")
