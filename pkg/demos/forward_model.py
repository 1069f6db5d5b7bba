"""Build the PSF measurement operator and check it the way the solvers rely on it.

Run: python demos/forward_model.py
"""
import numpy as np

from sparseloc.model import (
    GaussianPsf,
    GridGeometry,
    OpticsParams,
    apply_adjoint,
    apply_forward,
    build_measurement_matrix,
    diffraction_limit,
    gradient_lipschitz,
)

print(f"diffraction limit at 600 nm, NA 1.5: {diffraction_limit(OpticsParams(600, 1.5)):.0f} nm")

geom = GridGeometry(low_res_side=16, ratio=4)
op = build_measurement_matrix(GaussianPsf(sigma=1.0), geom)
print(f"A is {op.n_low} x {op.n_high}, {np.count_nonzero(op.matrix) / op.matrix.size:.1%} nonzero")

# a single emitter in the middle of the high-res grid lands as a blurred spot
x = np.zeros(geom.n_high)
c = geom.high_res_side // 2
x[c * geom.high_res_side + c] = 1.0
img = apply_forward(op, x).reshape(16, 16)
print("low-res image of a centred point (rows 6-9, cols 6-9):")
print(np.array2string(img[6:10, 6:10], precision=3))

rng = np.random.default_rng(0)
x = rng.random(geom.n_high)
r = rng.normal(size=geom.n_low)
print(f"matrix vs conv path: {np.max(np.abs(apply_forward(op, x) - apply_forward(op, x, 'conv'))):.1e}")
print(f"<Ax, r> - <x, A^T r>: {apply_forward(op, x) @ r - x @ apply_adjoint(op, r):.1e}")

lf = gradient_lipschitz(op)
svd = 2 * np.linalg.svd(op.matrix, compute_uv=False)[0] ** 2
print(f"L_f by power iteration {lf:.6f}, by SVD {svd:.6f}")
