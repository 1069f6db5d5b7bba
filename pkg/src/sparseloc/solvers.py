"""Sparse recovery: thresholding, ISTA/FISTA for the LASSO, a coordinate
descent reference solver, and SPARCOM in the covariance domain.

The LASSO objective throughout is ``||y - A x||^2 + lam * ||x||_1`` (no 1/2),
so its smooth part has gradient ``2 A^T (A x - y)`` and Lipschitz constant
``2 sigma_max(A)^2``.  Proximal steps use step size ``1 / L_f``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    LIPSCHITZ_SAFETY,
    MeasurementOperator,
    gradient_lipschitz,
    power_iteration,
)
from .simulate import FrameSequence

__all__ = [
    "IstaConfig",
    "CovarianceSummary",
    "SparcomPrecompute",
    "soft_threshold",
    "positive_soft_threshold",
    "lasso_objective",
    "ista",
    "fista",
    "lasso_oracle_cd",
    "empirical_covariance",
    "sparcom_precompute",
    "sparcom_objective",
    "sparcom_gradient",
    "sparcom_ista",
    "lambda_max",
    "DEFAULT_MAX_HIGH_RES",
]

_EPS = 1e-12
DEFAULT_MAX_HIGH_RES = 8192


@dataclass(frozen=True)
class IstaConfig:
    lam: float = 0.1
    max_iters: int = 100
    stop_tol: float = 0.0
    nonneg: bool = False
    step_override: float | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.stop_tol < 0:
            raise ValueError("stop_tol must be >= 0")
        if self.step_override is not None and not self.step_override > 0:
            raise ValueError("step_override must be > 0")


def soft_threshold(x, alpha):
    """``max(|x| - alpha, 0) * sign(x)``."""
    if np.any(np.asarray(alpha) < 0):
        raise ValueError("alpha must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - alpha, 0.0)


def positive_soft_threshold(x, alpha):
    """``max(x - alpha, 0)``."""
    if np.any(np.asarray(alpha) < 0):
        raise ValueError("alpha must be >= 0")
    return np.maximum(np.asarray(x, dtype=np.float64) - alpha, 0.0)


def _matrix(op) -> np.ndarray:
    if isinstance(op, MeasurementOperator):
        return op.matrix
    return np.asarray(op, dtype=np.float64)


def lasso_objective(a, y, x, lam) -> float:
    r = y - a @ x
    return float(r @ r + lam * np.abs(x).sum())


def _prepare(op, y, cfg: IstaConfig):
    a = _matrix(op)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] != a.shape[0]:
        raise ValueError(f"y has shape {y.shape}, expected ({a.shape[0]},)")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(a))):
        raise ValueError("non-finite input")
    step = cfg.step_override
    if step is None:
        step = 1.0 / gradient_lipschitz(a)
    prox = positive_soft_threshold if cfg.nonneg else soft_threshold
    return a, y, step, prox


def _rel_change(new, old):
    return np.linalg.norm(new - old) / max(np.linalg.norm(old), _EPS)


def ista(op, y, cfg: IstaConfig, lipschitz: float | None = None):
    """Proximal gradient descent from ``x = 0``.

    Runs at most ``cfg.max_iters`` thresholded updates.  Returns the final
    iterate and the objective trace (entry 0 is the objective at ``x = 0``).
    """
    if lipschitz is not None and cfg.step_override is None:
        cfg = IstaConfig(cfg.lam, cfg.max_iters, cfg.stop_tol, cfg.nonneg, 1.0 / lipschitz)
    a, y, step, prox = _prepare(op, y, cfg)
    aty2 = 2.0 * step * (a.T @ y)
    thr = cfg.lam * step
    x = np.zeros(a.shape[1])
    trace = [lasso_objective(a, y, x, cfg.lam)]
    for _ in range(cfg.max_iters):
        x_new = prox(x - 2.0 * step * (a.T @ (a @ x)) + aty2, thr)
        trace.append(lasso_objective(a, y, x_new, cfg.lam))
        done = cfg.stop_tol > 0 and _rel_change(x_new, x) < cfg.stop_tol
        x = x_new
        if done:
            break
    return x, np.array(trace)


def fista(op, y, cfg: IstaConfig, lipschitz: float | None = None):
    """ISTA with Nesterov momentum (``t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2``), no restarts."""
    if lipschitz is not None and cfg.step_override is None:
        cfg = IstaConfig(cfg.lam, cfg.max_iters, cfg.stop_tol, cfg.nonneg, 1.0 / lipschitz)
    a, y, step, prox = _prepare(op, y, cfg)
    aty2 = 2.0 * step * (a.T @ y)
    thr = cfg.lam * step
    x = np.zeros(a.shape[1])
    z = x.copy()
    t = 1.0
    trace = [lasso_objective(a, y, x, cfg.lam)]
    for _ in range(cfg.max_iters):
        x_new = prox(z - 2.0 * step * (a.T @ (a @ z)) + aty2, thr)
        t_new = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        z = x_new + ((t - 1.0) / t_new) * (x_new - x)
        trace.append(lasso_objective(a, y, x_new, cfg.lam))
        done = cfg.stop_tol > 0 and _rel_change(x_new, x) < cfg.stop_tol
        x, t = x_new, t_new
        if done:
            break
    return x, np.array(trace)


def lasso_oracle_cd(a, y, lam: float, nonneg: bool = False,
                    tol: float = 1e-12, max_sweeps: int = 1_000_000) -> np.ndarray:
    """Cyclic coordinate descent with exact one-dimensional minimisation.

    Kept deliberately separate from the proximal-gradient code so it can
    serve as an independent reference.
    """
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = a.shape[1]
    col_sq = np.einsum("ij,ij->j", a, a)
    x = np.zeros(n)
    resid = y.copy()
    prev = float(resid @ resid)
    half = lam / 2.0
    for _ in range(max_sweeps):
        for j in range(n):
            if col_sq[j] == 0.0:
                continue
            rho = a[:, j] @ resid + col_sq[j] * x[j]
            if nonneg:
                xj = max(rho - half, 0.0) / col_sq[j]
            elif rho > half:
                xj = (rho - half) / col_sq[j]
            elif rho < -half:
                xj = (rho + half) / col_sq[j]
            else:
                xj = 0.0
            if xj != x[j]:
                resid -= a[:, j] * (xj - x[j])
                x[j] = xj
        obj = float(resid @ resid) + lam * float(np.abs(x).sum())
        if abs(prev - obj) <= tol * max(abs(obj), _EPS):
            break
        prev = obj
    return x


def lambda_max(a, y) -> float:
    """Smallest ``lam`` for which the LASSO solution is zero: ``2 ||A^T y||_inf``."""
    return float(2.0 * np.abs(_matrix(a).T @ np.asarray(y, dtype=np.float64)).max())


@dataclass(frozen=True)
class CovarianceSummary:
    g_y: np.ndarray
    frame_count: int
    m_y: np.ndarray | None = None


def empirical_covariance(seq, full: bool = False) -> CovarianceSummary:
    """Temporal covariance of the frames, normalised by ``1/T``.

    Accepts a ``FrameSequence`` or a ``(T, ...)`` array.  With ``full=False``
    only the diagonal ``g_Y`` is formed.
    """
    frames = seq.frames if isinstance(seq, FrameSequence) else np.asarray(seq, dtype=np.float64)
    t = frames.shape[0]
    if t < 2:
        raise ValueError("covariance needs at least two frames")
    y = frames.reshape(t, -1)
    centred = y - y.mean(axis=0)
    g = np.einsum("ti,ti->i", centred, centred) / t
    m = None
    if full:
        m = centred.T @ centred / t
        m = 0.5 * (m + m.T)
    return CovarianceSummary(g_y=g, frame_count=t, m_y=m)


@dataclass(frozen=True)
class SparcomPrecompute:
    a_tilde: np.ndarray
    gram_sq: np.ndarray
    lipschitz: float


def sparcom_precompute(op, max_high_res: int = DEFAULT_MAX_HIGH_RES,
                       tol: float = 1e-6) -> SparcomPrecompute:
    """``A o A``, ``(A^T A) o (A^T A)`` and the Lipschitz constant of the data term."""
    a = _matrix(op)
    if a.shape[1] > max_high_res:
        raise MemoryError(
            f"N_h = {a.shape[1]} exceeds the configured cap of {max_high_res} "
            "for the dense N_h x N_h SPARCOM matrix")
    a_tilde = a * a
    gram = a.T @ a
    gram_sq = gram * gram
    gram_sq = 0.5 * (gram_sq + gram_sq.T)
    lf = power_iteration(lambda v: gram_sq @ v, a.shape[1], tol=tol) * LIPSCHITZ_SAFETY
    return SparcomPrecompute(a_tilde=a_tilde, gram_sq=gram_sq, lipschitz=lf)


def _g(cov) -> np.ndarray:
    return cov.g_y if isinstance(cov, CovarianceSummary) else np.asarray(cov, dtype=np.float64)


def sparcom_objective(cov, pre: SparcomPrecompute, m, lam: float) -> float:
    """``lam ||m||_1 + 1/2 ||diag(g_Y) - sum_i m_i A_i A_i^T||_F^2`` (expanded form)."""
    g = _g(cov)
    m = np.asarray(m, dtype=np.float64)
    quad = 0.5 * m @ (pre.gram_sq @ m) - m @ (pre.a_tilde.T @ g) + 0.5 * g @ g
    return float(quad + lam * np.abs(m).sum())


def sparcom_gradient(cov, pre: SparcomPrecompute, m) -> np.ndarray:
    """Gradient of the smooth part of ``sparcom_objective``."""
    return pre.gram_sq @ np.asarray(m, dtype=np.float64) - pre.a_tilde.T @ _g(cov)


def sparcom_ista(cov, pre: SparcomPrecompute, lam: float, max_iters: int = 100,
                 stop_tol: float = 0.0, return_trace: bool = False):
    """Positive ISTA on the diagonal-data SPARCOM objective, from ``m = 0``."""
    g = _g(cov)
    if g.shape != (pre.a_tilde.shape[0],):
        raise ValueError(f"g_Y has shape {g.shape}, expected ({pre.a_tilde.shape[0]},)")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    step = 1.0 / pre.lipschitz
    drive = step * (pre.a_tilde.T @ g)
    m = np.zeros(pre.gram_sq.shape[0])
    trace = [sparcom_objective(g, pre, m, lam)]
    for _ in range(max_iters):
        m_new = positive_soft_threshold(m + drive - step * (pre.gram_sq @ m), lam * step)
        if return_trace:
            trace.append(sparcom_objective(g, pre, m_new, lam))
        done = stop_tol > 0 and _rel_change(m_new, m) < stop_tol
        m = m_new
        if done:
            break
    return (m, np.array(trace)) if return_trace else m
