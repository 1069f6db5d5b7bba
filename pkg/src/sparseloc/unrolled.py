"""Unrolled networks: dense LISTA, convolutional LSPARCOM-style and deep ULM nets.

Every net keeps its parameters in a flat ``params`` dict (name -> float64
array) so the training code, the serialiser and finite-difference checks can
treat all kinds uniformly.  Non-negative quantities (thresholds, sharpness)
are stored as softplus preimages under ``*_raw`` names.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .model import GridGeometry, MeasurementOperator, gradient_lipschitz

__all__ = [
    "DenseLayerParams",
    "ConvLayerParams",
    "UnrolledNet",
    "KINDS",
    "softplus",
    "softplus_inverse",
    "init_lista_from_model",
    "init_conv_net",
    "lista_forward",
    "smooth_plus_threshold",
    "smooth_soft_threshold",
    "conv_net_forward",
    "upsample_nearest",
    "accumulate_frames",
    "count_parameters",
    "net_forward",
]

KINDS = ("lista-dense", "lsparcom-conv", "ulm-conv")


def softplus(r):
    return np.logaddexp(0.0, r)


def softplus_inverse(v):
    """Preimage of ``softplus``; maps 0 to ``-inf``."""
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("softplus_inverse needs v >= 0")
    with np.errstate(divide="ignore"):
        # v + log(1 - exp(-v)), stable for small and large v
        return np.where(v > 0, v + np.log(-np.expm1(-np.where(v > 0, v, 1.0))), -np.inf)


@dataclass(frozen=True)
class DenseLayerParams:
    w0: np.ndarray
    w: np.ndarray
    theta: float


@dataclass(frozen=True)
class ConvLayerParams:
    w0: np.ndarray
    w: np.ndarray
    lambda_k: float
    beta_k: float


@dataclass
class UnrolledNet:
    kind: str
    n_layers: int
    geometry: GridGeometry | None  # None only for dense nets on non-grid operators
    params: dict = field(default_factory=dict)
    trainable: tuple = ()
    upsample_mode: str = "nearest"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown net kind {self.kind!r}")
        if self.n_layers < 1:
            raise ValueError("an unrolled net needs at least one layer")
        if self.geometry is None and self.kind != "lista-dense":
            raise ValueError("convolutional nets need a grid geometry")

    def copy(self) -> "UnrolledNet":
        return copy.deepcopy(self)

    @property
    def filter_size(self) -> int | None:
        if self.kind == "lista-dense":
            return None
        return self.params["w.0"].shape[0]

    def layer(self, k: int):
        """Typed view of layer ``k`` with thresholds in their natural (non-raw) form."""
        p = self.params
        if self.kind == "lista-dense":
            return DenseLayerParams(p[f"w0.{k}"], p[f"w.{k}"], float(softplus(p[f"theta_raw.{k}"])))
        w0 = p["wi"] if self.kind == "lsparcom-conv" else p[f"w0.{k}"]
        return ConvLayerParams(w0, p[f"w.{k}"], float(softplus(p[f"lam_raw.{k}"])),
                               float(softplus(p[f"beta_raw.{k}"])))

    @property
    def layers(self) -> list:
        return [self.layer(k) for k in range(self.n_layers)]


def init_lista_from_model(op: MeasurementOperator, lam: float, K: int,
                          lipschitz: float | None = None) -> UnrolledNet:
    """Dense LISTA whose untrained forward pass is exactly ``K`` ISTA iterations."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    a = op.matrix
    lf = gradient_lipschitz(a) if lipschitz is None else lipschitz
    step = 1.0 / lf
    w0 = 2.0 * step * a.T
    w = np.eye(a.shape[1]) - 2.0 * step * (a.T @ a)
    theta_raw = softplus_inverse(lam * step)
    params = {}
    for k in range(K):
        params[f"w0.{k}"] = w0.copy()
        params[f"w.{k}"] = w.copy()
        params[f"theta_raw.{k}"] = np.array(theta_raw)
    geom = op.geometry
    if geom is None:
        # arbitrary matrices: record a nominal geometry only if the sizes are square grids
        geom = _nominal_geometry(a.shape)
    return UnrolledNet("lista-dense", K, geom, params, tuple(params))


def _nominal_geometry(shape):
    m = int(round(np.sqrt(shape[0])))
    n = int(round(np.sqrt(shape[1])))
    if m * m == shape[0] and n * n == shape[1] and n % m == 0:
        return GridGeometry(m, n // m)
    return None


def init_conv_net(kind: str, geometry: GridGeometry, K: int = 10, filter_size: int = 5,
                  rng_seed: int = 0, filter_std: float = 0.1, threshold_init: float = 0.01,
                  beta_init: float = 10.0, train_beta: bool = True) -> UnrolledNet:
    """Randomly initialised ``ulm-conv`` or ``lsparcom-conv`` net."""
    if kind not in ("ulm-conv", "lsparcom-conv"):
        raise ValueError(f"{kind!r} is not a convolutional kind")
    if K < 1:
        raise ValueError("K must be >= 1")
    if filter_size < 1 or filter_size % 2 == 0:
        raise ValueError("filter_size must be odd")
    if beta_init <= 0 or threshold_init < 0:
        raise ValueError("beta_init must be > 0 and threshold_init >= 0")
    rng = np.random.default_rng(rng_seed)
    c = filter_size
    params = {}
    if kind == "lsparcom-conv":
        params["wi"] = rng.normal(0.0, filter_std, (c, c))
    for k in range(K):
        if kind == "ulm-conv":
            params[f"w0.{k}"] = rng.normal(0.0, filter_std, (c, c))
        params[f"w.{k}"] = rng.normal(0.0, filter_std, (c, c))
        params[f"lam_raw.{k}"] = np.array(softplus_inverse(threshold_init))
        params[f"beta_raw.{k}"] = np.array(softplus_inverse(beta_init))
    trainable = tuple(n for n in params if train_beta or not n.startswith("beta_raw"))
    return UnrolledNet(kind, K, geometry, params, trainable)


def _soft(z, theta):
    return np.sign(z) * np.maximum(np.abs(z) - theta, 0.0)


def lista_forward(net: UnrolledNet, y, cache: list | None = None) -> np.ndarray:
    """``x_{k+1} = T_{theta_k}(W0_k y + W_k x_k)`` from ``x_0 = 0``; ``y`` may be batched ``(B, N_l)``."""
    if net.kind != "lista-dense":
        raise ValueError(f"lista_forward needs a lista-dense net, got {net.kind}")
    y = np.asarray(y, dtype=np.float64)
    n_l = net.params["w0.0"].shape[1]
    if y.shape[-1] != n_l:
        raise ValueError(f"y has length {y.shape[-1]}, expected {n_l}")
    single = y.ndim == 1
    yb = y[None, :] if single else y
    x = np.zeros((yb.shape[0], net.params["w.0"].shape[0]))
    p = net.params
    for k in range(net.n_layers):
        theta = softplus(p[f"theta_raw.{k}"])
        # x_0 = 0, so the first layer has no state term
        z = yb @ p[f"w0.{k}"].T if k == 0 else yb @ p[f"w0.{k}"].T + x @ p[f"w.{k}"].T
        if cache is not None:
            cache.append((x, z, theta))
        x = _soft(z, theta)
    return x[0] if single else x


def smooth_plus_threshold(x, alpha, beta):
    """``max(x, 0) * sigmoid(beta * (x - alpha))``: smooth stand-in for positive hard thresholding."""
    if np.any(np.asarray(beta) <= 0):
        raise ValueError("beta must be > 0")
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) * expit(beta * (x - alpha))


def _softplus_beta(z, beta):
    return np.logaddexp(0.0, beta * z) / beta


def smooth_soft_threshold(x, lam, beta):
    """Smooth odd soft threshold ``sp(x - lam) - sp(-x - lam)`` with ``sp(z) = log(1 + e^{beta z}) / beta``.

    Exactly zero at zero, differentiable everywhere, and within ``ln 2 / beta``
    of the hard soft-threshold for every ``x``.
    """
    if np.any(np.asarray(beta) <= 0):
        raise ValueError("beta must be > 0")
    x = np.asarray(x, dtype=np.float64)
    return _softplus_beta(x - lam, beta) - _softplus_beta(-x - lam, beta)


def upsample_nearest(img, ratio: int) -> np.ndarray:
    """Nearest-neighbour upsampling of the last two axes."""
    img = np.asarray(img, dtype=np.float64)
    return np.repeat(np.repeat(img, ratio, axis=-2), ratio, axis=-1)


def pad_same(x, c):
    h = c // 2
    return np.pad(x, ((0, 0), (h, h), (h, h)))


def corr_same(x, w) -> np.ndarray:
    """Zero-padded same-size 2D cross-correlation of a batch ``(B, H, W)`` with ``w``."""
    c = w.shape[0]
    _, rows, cols = x.shape
    xp = pad_same(x, c)
    out = np.zeros(x.shape)
    # one shifted slice per tap: small kernels make this far cheaper than a window view
    for i in range(c):
        for j in range(c):
            out += w[i, j] * xp[:, i:i + rows, j:j + cols]
    return out


def conv_net_forward(net: UnrolledNet, image, cache: dict | None = None) -> np.ndarray:
    """Forward pass of a convolutional unrolled net.

    ``ulm-conv`` takes low-res frames ``(H, W)`` or ``(B, H, W)``, upsampled to
    the high-res grid; ``lsparcom-conv`` takes ``G`` already on the high-res
    grid.  The nets are fully convolutional, so patches smaller than the
    full field of view are accepted.  Returns high-res images of matching
    batch shape.
    """
    if net.kind not in ("ulm-conv", "lsparcom-conv"):
        raise ValueError(f"conv_net_forward needs a conv net, got {net.kind}")
    img = np.asarray(image, dtype=np.float64)
    single = img.ndim == 2
    if single:
        img = img[None]
    g = net.geometry
    if img.ndim != 3 or min(img.shape[1:]) < 1:
        raise ValueError(f"input must be 2-D images or a batch of them, got shape {img.shape}")
    p = net.params
    if net.kind == "ulm-conv":
        u = upsample_nearest(img, g.ratio)
        drive_shared = None
    else:
        u = img
        drive_shared = corr_same(u, p["wi"])
    x = np.zeros_like(u)
    layers = []
    for k in range(net.n_layers):
        lam = softplus(p[f"lam_raw.{k}"])
        beta = softplus(p[f"beta_raw.{k}"])
        if net.kind == "ulm-conv":
            z = corr_same(u, p[f"w0.{k}"]) + corr_same(x, p[f"w.{k}"])
            x_new = smooth_soft_threshold(z, lam, beta)
        else:
            z = drive_shared + x + corr_same(x, p[f"w.{k}"])
            x_new = smooth_plus_threshold(z, lam, beta)
        layers.append((x, z, lam, beta))
        x = x_new
    if cache is not None:
        cache["u"] = u
        cache["layers"] = layers
    return x[0] if single else x


def net_forward(net: UnrolledNet, inputs, cache=None):
    """Dispatch to the forward pass for ``net.kind``."""
    if net.kind == "lista-dense":
        return lista_forward(net, inputs, cache)
    return conv_net_forward(net, inputs, cache)


def accumulate_frames(estimates) -> np.ndarray:
    """Sum per-frame estimates into one super-resolved image."""
    arrs = [np.asarray(e, dtype=np.float64) for e in estimates]
    if not arrs:
        raise ValueError("need at least one estimate")
    shape = arrs[0].shape
    for a in arrs:
        if a.shape != shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {shape}")
    return np.sum(arrs, axis=0)


def count_parameters(net: UnrolledNet) -> int:
    """Number of trainable scalars."""
    return int(sum(np.asarray(net.params[n]).size for n in net.trainable))
