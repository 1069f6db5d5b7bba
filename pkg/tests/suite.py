"""Shared random problem generators for the test modules."""
import numpy as np

N_LOW, N_HIGH, SPARSITY, LAM = 16, 64, 3, 0.1


def lasso_instance(seed, noise=0.0):
    """Gaussian 16x64 operator (entries N(0, 1/16)) and a 3-sparse N(0, 1) signal."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(N_LOW, N_HIGH)) / 4.0
    x = np.zeros(N_HIGH)
    x[rng.choice(N_HIGH, SPARSITY, replace=False)] = rng.normal(size=SPARSITY)
    y = a @ x + noise * rng.normal(size=N_LOW)
    return a, x, y
