"""Reverse-mode gradients through the unrolled graphs, patch datasets and the
training loop.

Gradients are taken with respect to the *stored* parameters, i.e. the raw
softplus preimages for thresholds and sharpness.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .simulate import FrameSequence, GroundTruth
from .solvers import empirical_covariance
from .unrolled import (
    UnrolledNet,
    corr_same,
    conv_net_forward,
    lista_forward,
    net_forward,
    pad_same,
    softplus,
    upsample_nearest,
)

__all__ = [
    "TrainSample",
    "OptimizerConfig",
    "OptimizerState",
    "TrainResult",
    "NonFiniteError",
    "DivergenceError",
    "loss_mse",
    "loss_mse_grad",
    "backprop",
    "finite_difference_check",
    "make_patches",
    "make_covariance_samples",
    "stack_samples",
    "train_net",
]

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    """A forward or backward intermediate became NaN or infinite."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class TrainSample:
    input: np.ndarray
    target: np.ndarray


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.input for s in samples]), np.stack([s.target for s in samples]))


def loss_mse(prediction, target) -> float:
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    d = prediction - target
    return float(np.mean(d * d))


def loss_mse_grad(prediction, target) -> np.ndarray:
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    return 2.0 * (prediction - target) / prediction.size


def _check(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {where}")


def _corr_grad_w(x, g, c):
    _, rows, cols = x.shape
    xp = pad_same(x, c)
    return np.array([[np.sum(xp[:, i:i + rows, j:j + cols] * g) for j in range(c)]
                     for i in range(c)])


def _corr_grad_x(g, w):
    return corr_same(g, w[::-1, ::-1])


def _backprop_dense(net, y, t):
    cache = []
    out = lista_forward(net, y, cache)
    _check(out, "output")
    loss = loss_mse(out, t)
    g = loss_mse_grad(out, t)
    p = net.params
    grads = {}
    for k in reversed(range(net.n_layers)):
        x, z, theta = cache[k]
        active = np.abs(z) > theta
        gz = g * active
        raw = p[f"theta_raw.{k}"]
        grads[f"theta_raw.{k}"] = np.array(-np.sum(gz * np.sign(z)) * expit(raw))
        grads[f"w0.{k}"] = gz.T @ y
        grads[f"w.{k}"] = gz.T @ x
        g = gz @ p[f"w.{k}"]
        _check(g, f"backward pass of layer {k}")
    return loss, grads


def _sst_grads(z, lam, beta):
    """Partials of the smooth soft threshold wrt input, threshold and sharpness."""
    a = z - lam
    b = -z - lam
    sa = expit(beta * a)
    sb = expit(beta * b)
    spa = np.logaddexp(0.0, beta * a) / beta
    spb = np.logaddexp(0.0, beta * b) / beta
    dz = sa + sb
    dlam = sb - sa
    dbeta = ((a * sa - spa) - (b * sb - spb)) / beta
    return dz, dlam, dbeta


def _spt_grads(z, alpha, beta):
    """Partials of the smooth positive threshold wrt input, threshold and sharpness."""
    s = expit(beta * (z - alpha))
    relu = np.maximum(z, 0.0)
    ds = s * (1.0 - s)
    dz = (z > 0) * s + relu * beta * ds
    dalpha = -relu * beta * ds
    dbeta = relu * (z - alpha) * ds
    return dz, dalpha, dbeta


def _backprop_conv(net, inp, t):
    cache = {}
    out = conv_net_forward(net, inp, cache)
    _check(out, "output")
    loss = loss_mse(out, t)
    g = loss_mse_grad(out, t)
    p = net.params
    c = net.filter_size
    u = cache["u"]
    grads = {}
    g_drive = np.zeros_like(u) if net.kind == "lsparcom-conv" else None
    for k in reversed(range(net.n_layers)):
        x, z, lam, beta = cache["layers"][k]
        if net.kind == "ulm-conv":
            dz, dlam, dbeta = _sst_grads(z, lam, beta)
        else:
            dz, dlam, dbeta = _spt_grads(z, lam, beta)
        gz = g * dz
        grads[f"lam_raw.{k}"] = np.array(np.sum(g * dlam) * expit(p[f"lam_raw.{k}"]))
        grads[f"beta_raw.{k}"] = np.array(np.sum(g * dbeta) * expit(p[f"beta_raw.{k}"]))
        grads[f"w.{k}"] = _corr_grad_w(x, gz, c)
        g = _corr_grad_x(gz, p[f"w.{k}"])
        if net.kind == "ulm-conv":
            grads[f"w0.{k}"] = _corr_grad_w(u, gz, c)
        else:
            g = g + gz  # identity skip
            g_drive += gz
        _check(g, f"backward pass of layer {k}")
    if net.kind == "lsparcom-conv":
        grads["wi"] = _corr_grad_w(u, g_drive, c)
    return loss, grads


def backprop(net: UnrolledNet, sample) -> tuple[float, dict]:
    """MSE loss and its exact gradient for every stored parameter.

    ``sample`` is a ``TrainSample``, a list of them (a mini-batch) or an
    ``(inputs, targets)`` tuple of stacked arrays.
    """
    if isinstance(sample, TrainSample):
        inp, tgt = sample.input[None], sample.target[None]
    elif isinstance(sample, tuple):
        inp, tgt = sample
    else:
        inp, tgt = stack_samples(sample)
    inp = np.asarray(inp, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if net.kind == "lista-dense":
        inp = inp.reshape(inp.shape[0], -1)
        tgt = tgt.reshape(tgt.shape[0], -1)
        return _backprop_dense(net, inp, tgt)
    return _backprop_conv(net, inp, tgt)


def _batch_loss(net, inp, tgt):
    if net.kind == "lista-dense":
        inp = inp.reshape(inp.shape[0], -1)
        tgt = tgt.reshape(tgt.shape[0], -1)
    return loss_mse(net_forward(net, inp), tgt)


def finite_difference_check(net: UnrolledNet, sample, step: float = 1e-5,
                            names=None, floor: float = 1e-8) -> dict:
    """Central differences for every scalar of the named (default: all) parameters.

    Returns ``{name: max relative error}`` with relative error
    ``|fd - bp| / max(|fd|, |bp|, floor)``.
    """
    if isinstance(sample, TrainSample):
        inp, tgt = sample.input[None], sample.target[None]
    elif isinstance(sample, tuple):
        inp, tgt = sample
    else:
        inp, tgt = stack_samples(sample)
    _, grads = backprop(net, (inp, tgt))
    probe = net.copy()
    out = {}
    for name in names or list(net.params):
        arr = np.array(probe.params[name], dtype=np.float64)
        probe.params[name] = arr
        flat = arr.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _batch_loss(probe, inp, tgt)
            flat[i] = orig - step
            down = _batch_loss(probe, inp, tgt)
            flat[i] = orig
            fd = (up - down) / (2 * step)
            bp = float(np.asarray(grads[name]).reshape(-1)[i])
            if not np.isfinite(orig):
                fd = 0.0  # -inf raw threshold: the parameter is pinned at zero
            err = abs(fd - bp) / max(abs(fd), abs(bp), floor)
            worst = max(worst, err)
        out[name] = worst
    return out


def _tile_starts(side, patch, stride):
    if patch > side:
        raise ValueError(f"patch size {patch} exceeds frame side {side}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return range(0, side - patch + 1, stride)


def _blur(img, sigma):
    return gaussian_filter(img, sigma, mode="constant") if sigma > 0 else img


def _tile(inputs, targets, in_side, patch, stride, ratio, rng_seed, flatten):
    samples = []
    starts = list(_tile_starts(in_side, patch, stride))
    for inp, tgt in zip(inputs, targets):
        for r in starts:
            for c in starts:
                pi = inp[r:r + patch, c:c + patch]
                pt = tgt[r * ratio:(r + patch) * ratio, c * ratio:(c + patch) * ratio]
                if flatten:
                    pi, pt = pi.ravel(), pt.ravel()
                samples.append(TrainSample(pi.copy(), pt.copy()))
    if rng_seed is not None:
        order = np.random.default_rng(rng_seed).permutation(len(samples))
        samples = [samples[i] for i in order]
    return samples


def make_patches(sequence: FrameSequence, ground_truth: GroundTruth, patch_size: int = 16,
                 stride: int = 8, rng_seed: int | None = 0, blur_sigma: float = 0.0,
                 flatten: bool = False) -> list[TrainSample]:
    """Overlapping frame patches paired with the co-registered high-res truth.

    ``patch_size`` and ``stride`` are in low-res pixels; targets are
    ``patch_size * ratio`` high-res pixels, optionally Gaussian-blurred
    (``blur_sigma`` in high-res pixels) before cropping.  ``rng_seed``
    shuffles the sample order (``None`` keeps tiling order).
    """
    g = sequence.geometry
    n = g.high_res_side
    targets = [_blur(x.reshape(n, n), blur_sigma) for x in ground_truth.per_frame_x]
    return _tile(sequence.frames, targets, g.low_res_side, patch_size, stride, g.ratio,
                 rng_seed, flatten)


def make_covariance_samples(sequence: FrameSequence, ground_truth: GroundTruth,
                            frames_per_sample: int, patch_size: int = 16, stride: int = 8,
                            rng_seed: int | None = 0, blur_sigma: float = 0.0,
                            normalize: bool = True) -> list[TrainSample]:
    """LSPARCOM training pairs: ``G`` (upsampled frame variance) vs truth variance, per window.

    The sequence is cut into consecutive windows of ``frames_per_sample``
    frames.  ``patch_size`` and ``stride`` are in high-res pixels here.  With
    ``normalize`` each window's input and target are scaled by the input max.
    """
    g = sequence.geometry
    n = g.high_res_side
    if frames_per_sample < 2:
        raise ValueError("frames_per_sample must be >= 2")
    inputs, targets = [], []
    for start in range(0, sequence.n_frames - frames_per_sample + 1, frames_per_sample):
        sl = slice(start, start + frames_per_sample)
        gy = empirical_covariance(sequence.frames[sl]).g_y.reshape(g.low_res_side, -1)
        big = upsample_nearest(gy, g.ratio)
        m = ground_truth.per_frame_x[sl].var(axis=0).reshape(n, n)
        scale = big.max() if normalize and big.max() > 0 else 1.0
        inputs.append(big / scale)
        targets.append(_blur(m, blur_sigma) / scale)
    return _tile(inputs, targets, n, patch_size, stride, 1, rng_seed, False)


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32

    def __post_init__(self):
        if self.method not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.method!r}")
        if self.learning_rate < 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be >= 0 and batch_size >= 1")


@dataclass
class OptimizerState:
    config: OptimizerConfig
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step_count: int = 0

    def update(self, params: dict, grads: dict, names) -> None:
        cfg = self.config
        self.step_count += 1
        for n in names:
            g = grads[n]
            if cfg.method == "sgd":
                params[n] = np.asarray(params[n] - cfg.learning_rate * g)
                continue
            m = self.first_moment.get(n)
            if m is None:
                m = self.first_moment[n] = np.zeros_like(g)
                self.second_moment[n] = np.zeros_like(g)
            v = self.second_moment[n]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1 ** self.step_count)
            vhat = v / (1 - cfg.beta2 ** self.step_count)
            params[n] = np.asarray(params[n] - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps))


@dataclass
class TrainResult:
    net: UnrolledNet
    losses: np.ndarray  # full training-set loss after each epoch
    initial_loss: float


def _check_params(net, epoch):
    for name in net.trainable:
        value = np.asarray(net.params[name])
        if np.any(np.isnan(value)) or np.any(np.isposinf(value)):
            raise DivergenceError(f"epoch {epoch}: parameter {name} became non-finite")
        # a sharpness whose softplus underflows to zero cannot be evaluated
        if name.startswith("beta_raw") and np.any(softplus(value) <= 0):
            raise DivergenceError(f"epoch {epoch}: sharpness {name} collapsed to zero")


def train_net(net: UnrolledNet, samples, epochs: int, opt: OptimizerConfig | None = None,
              rng_seed: int = 0, callback=None) -> TrainResult:
    """Mini-batch training of a copy of ``net``; the input net is left untouched."""
    if not samples:
        raise ValueError("no training samples")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    opt = opt or OptimizerConfig()
    net = net.copy()
    inp, tgt = stack_samples(samples)
    rng = np.random.default_rng(rng_seed)
    state = OptimizerState(opt)
    initial = _batch_loss(net, inp, tgt)
    if not np.isfinite(initial):
        raise DivergenceError("initial loss is not finite")
    losses = []
    n = len(samples)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, opt.batch_size):
            idx = order[s:s + opt.batch_size]
            try:
                loss, grads = backprop(net, (inp[idx], tgt[idx]))
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss):
                raise DivergenceError(f"epoch {epoch}: loss became {loss}")
            state.update(net.params, grads, net.trainable)
            _check_params(net, epoch)
        full = _batch_loss(net, inp, tgt)
        if not np.isfinite(full):
            raise DivergenceError(f"epoch {epoch}: loss became {full}")
        losses.append(full)
        log.debug("epoch %d loss %.6g", epoch, full)
        if callback is not None:
            callback(epoch, full, net)
    return TrainResult(net, np.array(losses), initial)
