"""Optical/acoustic forward model.

A high-resolution ``N x N`` grid of emitters is imaged onto an ``M x M``
detector through a Gaussian PSF.  The imaging map is kept both as an explicit
``M^2 x N^2`` matrix and as a convolve-then-decimate routine; the two agree to
rounding error.

Coordinate convention: low-res pixel ``p`` is centred at ``p`` (low-res units)
and high-res cell ``r`` is centred at ``(r + 0.5) / ratio - 0.5``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d
from scipy.special import ndtr

__all__ = [
    "OpticsParams",
    "GridGeometry",
    "GaussianPsf",
    "MeasurementOperator",
    "ConvergenceError",
    "build_measurement_matrix",
    "apply_forward",
    "apply_adjoint",
    "power_iteration",
    "gradient_lipschitz",
    "diffraction_limit",
    "LIPSCHITZ_SAFETY",
]

LIPSCHITZ_SAFETY = 1.001


class ConvergenceError(RuntimeError):
    """Raised when an iterative estimate fails to settle within its cap."""


@dataclass(frozen=True)
class OpticsParams:
    wavelength: float
    numerical_aperture: float

    def __post_init__(self):
        if not self.wavelength > 0:
            raise ValueError("wavelength must be > 0")
        if not self.numerical_aperture > 0:
            raise ValueError("numerical_aperture must be > 0")


@dataclass(frozen=True)
class GridGeometry:
    low_res_side: int
    ratio: int

    def __post_init__(self):
        if int(self.low_res_side) != self.low_res_side or self.low_res_side < 1:
            raise ValueError("low_res_side must be a positive integer")
        if int(self.ratio) != self.ratio or self.ratio < 1:
            raise ValueError("ratio must be a positive integer")
        object.__setattr__(self, "low_res_side", int(self.low_res_side))
        object.__setattr__(self, "ratio", int(self.ratio))

    @property
    def high_res_side(self) -> int:
        return self.low_res_side * self.ratio

    @property
    def n_low(self) -> int:
        return self.low_res_side ** 2

    @property
    def n_high(self) -> int:
        return self.high_res_side ** 2


@dataclass(frozen=True)
class GaussianPsf:
    """Isotropic Gaussian PSF; ``sigma`` and ``truncation_radius`` in low-res pixels."""

    sigma: float
    truncation_radius: float | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.truncation_radius is None:
            object.__setattr__(self, "truncation_radius", 4.0 * self.sigma)
        # small tolerance so 3*sigma computed elsewhere is accepted
        if self.truncation_radius < 3.0 * self.sigma * (1 - 1e-12):
            raise ValueError("truncation_radius must be >= 3 * sigma")

    def pixel_response(self, offset):
        """Fraction of a unit point source landing in a pixel ``offset`` pixels away (1D).

        The Gaussian is integrated over the pixel footprint so responses sum
        to one over an infinite row; entries beyond the truncation radius are
        zeroed without renormalisation.
        """
        offset = np.asarray(offset, dtype=np.float64)
        vals = ndtr((offset + 0.5) / self.sigma) - ndtr((offset - 0.5) / self.sigma)
        return np.where(np.abs(offset) <= self.truncation_radius, vals, 0.0)


def _axis_matrix(psf: GaussianPsf, geometry: GridGeometry) -> np.ndarray:
    """1D response ``B[p, r]``; the 2D matrix is ``kron(B, B)``."""
    ratio = geometry.ratio
    p = np.arange(geometry.low_res_side, dtype=np.float64)[:, None]
    centers = (np.arange(geometry.high_res_side, dtype=np.float64) + 0.5) / ratio - 0.5
    return psf.pixel_response(p - centers[None, :])


def _axis_kernel(psf: GaussianPsf, ratio: int) -> tuple[np.ndarray, int]:
    """High-res 1D kernel ``h[n]`` with ``B[p, r] = h[ratio*p - r]``; returns (h, n_min)."""
    shift = (ratio - 1) / 2.0
    reach = psf.truncation_radius * ratio
    n_min = int(np.floor(-reach - shift)) - 1
    n_max = int(np.ceil(reach - shift)) + 1
    n = np.arange(n_min, n_max + 1, dtype=np.float64)
    # evaluate at the same offsets the matrix path uses: p - c_r = (n + shift) / ratio
    return psf.pixel_response((n + shift) / ratio), n_min


@dataclass(frozen=True, eq=False)
class MeasurementOperator:
    """Linear map from a vectorised high-res grid to a vectorised low-res image.

    Built either from a PSF and geometry (``build_measurement_matrix``) or
    wrapped around an arbitrary dense matrix (``from_matrix``); only the
    former supports the convolutional path.
    """

    matrix: np.ndarray
    geometry: GridGeometry | None = None
    psf: GaussianPsf | None = None
    _kernel: tuple | None = field(default=None, repr=False)

    @classmethod
    def from_matrix(cls, matrix) -> "MeasurementOperator":
        a = np.array(matrix, dtype=np.float64, copy=True)
        if a.ndim != 2:
            raise ValueError("measurement matrix must be 2D")
        a.setflags(write=False)
        return cls(matrix=a)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def n_low(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_high(self) -> int:
        return self.matrix.shape[1]

    def forward(self, x, path: str = "matrix") -> np.ndarray:
        return apply_forward(self, x, path=path)

    def adjoint(self, r, path: str = "matrix") -> np.ndarray:
        return apply_adjoint(self, r, path=path)


def build_measurement_matrix(psf: GaussianPsf, geometry: GridGeometry) -> MeasurementOperator:
    """Explicit PSF matrix: column ``j`` is the low-res image of a unit source in high-res cell ``j``."""
    b = _axis_matrix(psf, geometry)
    a = np.kron(b, b)
    a.setflags(write=False)
    return MeasurementOperator(matrix=a, geometry=geometry, psf=psf,
                               _kernel=_axis_kernel(psf, geometry.ratio))


def _check_len(v, n, what):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != n:
        raise ValueError(f"{what} has length {v.shape[-1]}, expected {n}")
    return v


def _conv_forward(op: MeasurementOperator, x: np.ndarray) -> np.ndarray:
    g = op.geometry
    h, n_min = op._kernel
    kernel = np.outer(h, h)
    img = x.reshape(g.high_res_side, g.high_res_side)
    full = convolve2d(img, kernel, mode="full")
    # full[i] = sum_r h[n_min + i - r] x[r]; we need n = ratio*p - r
    idx = g.ratio * np.arange(g.low_res_side) - n_min
    pad = max(0, int(idx.max()) + 1 - full.shape[0])
    if pad:
        full = np.pad(full, ((0, pad), (0, pad)))
    return full[np.ix_(idx, idx)].ravel()


def _conv_adjoint(op: MeasurementOperator, r: np.ndarray) -> np.ndarray:
    g = op.geometry
    h, n_min = op._kernel
    kernel = np.outer(h, h)
    idx = g.ratio * np.arange(g.low_res_side) - n_min
    size = max(int(idx.max()) + 1, g.high_res_side + len(h) - 1)
    up = np.zeros((size, size))
    up[np.ix_(idx, idx)] = r.reshape(g.low_res_side, g.low_res_side)
    # transpose of "full convolution then sample": correlate and keep rows 0..N-1
    corr = convolve2d(up, kernel[::-1, ::-1], mode="full")
    off = len(h) - 1
    n = g.high_res_side
    return corr[off:off + n, off:off + n].ravel()


def apply_forward(op: MeasurementOperator, x, path: str = "matrix") -> np.ndarray:
    """``y = A x``.  ``path`` is ``"matrix"`` or ``"conv"``."""
    x = _check_len(x, op.n_high, "x")
    if not np.all(np.isfinite(x)):
        raise ValueError("x contains non-finite entries")
    if path == "matrix":
        return x @ op.matrix.T if x.ndim > 1 else op.matrix @ x
    if path == "conv":
        if op.geometry is None:
            raise ValueError("conv path requires a PSF-built operator")
        if x.ndim > 1:
            return np.stack([_conv_forward(op, v) for v in x])
        return _conv_forward(op, x)
    raise ValueError(f"unknown path {path!r}")


def apply_adjoint(op: MeasurementOperator, r, path: str = "matrix") -> np.ndarray:
    """``A^T r``."""
    r = _check_len(r, op.n_low, "r")
    if path == "matrix":
        return r @ op.matrix if r.ndim > 1 else op.matrix.T @ r
    if path == "conv":
        if op.geometry is None:
            raise ValueError("conv path requires a PSF-built operator")
        if r.ndim > 1:
            return np.stack([_conv_adjoint(op, v) for v in r])
        return _conv_adjoint(op, r)
    raise ValueError(f"unknown path {path!r}")


def power_iteration(matvec, n: int, tol: float = 1e-6, max_iter: int = 10_000) -> float:
    """Largest eigenvalue of a symmetric PSD operator given as ``matvec``.

    Starts from the all-ones vector; stops once the Rayleigh quotient changes
    by less than ``tol`` relative.
    """
    v = np.ones(n) / np.sqrt(n)
    lam = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        lam_new = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        if abs(lam_new - lam) <= tol * abs(lam_new):
            return lam_new
        lam = lam_new
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations")


def gradient_lipschitz(op, tol: float = 1e-6, max_iter: int = 10_000) -> float:
    """Upper bound on the Lipschitz constant of ``grad ||Ax - y||^2``, i.e. ``2 sigma_max(A)^2``."""
    a = op.matrix if isinstance(op, MeasurementOperator) else np.asarray(op, dtype=np.float64)
    lam = power_iteration(lambda v: a.T @ (a @ v), a.shape[1], tol=tol, max_iter=max_iter)
    return 2.0 * lam * LIPSCHITZ_SAFETY


def diffraction_limit(optics: OpticsParams) -> float:
    """Abbe limit ``wavelength / (2 NA)``, in the wavelength's units."""
    return optics.wavelength / (2.0 * optics.numerical_aperture)
