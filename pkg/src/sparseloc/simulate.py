"""Synthetic SMLM / ULM frame sequences with per-frame ground truth.

Positions are continuous ``(row, col)`` coordinates in high-res pixel units;
cell ``(i, j)`` is centred at ``(i, j)`` so the field of view spans
``[-0.5, N - 0.5)`` on each axis.  Every frame draws from its own RNG
substream keyed on ``(seed, frame index)``, so frames can be rendered in any
order (or in parallel) with identical results.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import GridGeometry, MeasurementOperator, apply_forward

__all__ = [
    "Emitter",
    "GroundTruth",
    "NoiseModel",
    "FrameSequence",
    "sample_structure",
    "render_sequence",
    "render_ulm_sequence",
    "bin_positions",
    "frame_rng",
]

# substream tags keep structure sampling and frame rendering independent
_FRAME_STREAM = 0
_ULM_STREAM = 1


@dataclass(frozen=True)
class Emitter:
    position: tuple[float, float]
    mean_photons: float = 1000.0
    on_probability: float = 0.1

    def __post_init__(self):
        if not self.mean_photons > 0:
            raise ValueError("mean_photons must be > 0")
        if not 0.0 < self.on_probability <= 1.0:
            raise ValueError("on_probability must lie in (0, 1]")


@dataclass(frozen=True)
class NoiseModel:
    gaussian_sigma: float = 0.0
    background: float = 0.0
    poisson: bool = False

    def __post_init__(self):
        if self.gaussian_sigma < 0 or self.background < 0:
            raise ValueError("noise parameters must be >= 0")


@dataclass
class GroundTruth:
    """Per-frame truth.

    ``per_frame_x`` is ``(T, N_h)``; ``frame_points[t]`` is a ``(k, 3)``
    array of ``(row, col, intensity)`` for the sources active in frame ``t``.
    """

    emitters: list
    per_frame_x: np.ndarray
    frame_points: list = field(default_factory=list)

    @property
    def static_grid(self) -> np.ndarray:
        return self.per_frame_x.sum(axis=0)


@dataclass
class FrameSequence:
    frames: np.ndarray  # (T, M, M)
    geometry: GridGeometry
    seed: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        m = self.geometry.low_res_side
        if self.frames.ndim != 3 or self.frames.shape[1:] != (m, m):
            raise ValueError(f"frames must have shape (T, {m}, {m}), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("a sequence needs at least one frame")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def as_matrix(self) -> np.ndarray:
        """Frames as rows, ``(T, M^2)`` (the transpose of the usual ``Y``)."""
        return self.frames.reshape(self.n_frames, -1)


def frame_rng(seed: int, t: int, stream: int = _FRAME_STREAM) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(t)])


def bin_positions(positions, high_res_side: int) -> np.ndarray:
    """Flat index of the nearest high-res cell for each ``(row, col)``."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    cells = np.clip(np.floor(pos + 0.5).astype(np.int64), 0, high_res_side - 1)
    return cells[:, 0] * high_res_side + cells[:, 1]


def _point_segment_distance(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else np.clip((p - a) @ ab / denom, 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def sample_structure(kind: str, params: dict, rng_seed: int) -> list[Emitter]:
    """Random emitter layout.

    ``kind="uniform-points"`` takes ``count`` and ``side`` (FOV side in high-res
    pixels).  ``kind="polyline-filament"`` takes ``side``, ``n_filaments``,
    ``n_segments``, ``segment_length`` as ``(lo, hi)``, ``spacing`` between
    consecutive emitters along the path, ``thickness`` (max perpendicular
    jitter), an optional ``margin`` and an optional ``min_separation``: a
    candidate closer than this to an already placed emitter (at a crossing
    or a sharp turn) is dropped.  Both accept ``mean_photons`` and
    ``on_probability``.

    The generated polyline vertices are attached to the returned list as
    ``.segments`` for geometric checks.
    """
    rng = np.random.default_rng(rng_seed)
    side = params.get("side")
    if side is None or side <= 0:
        raise ValueError("params['side'] must be a positive FOV size")
    lo, hi = -0.5, side - 0.5
    photons = params.get("mean_photons", 1000.0)
    p_on = params.get("on_probability", 0.1)
    margin = params.get("margin", 0.0)
    if margin < 0 or 2 * margin >= side:
        raise ValueError("margin does not fit inside the field of view")

    if kind == "uniform-points":
        count = int(params.get("count", 0))
        if count < 0:
            raise ValueError("count must be >= 0")
        pos = rng.uniform(lo + margin, hi - margin, size=(count, 2))
        out = _EmitterList(Emitter((float(r), float(c)), photons, p_on) for r, c in pos)
        out.segments = []
        return out

    if kind != "polyline-filament":
        raise ValueError(f"unknown structure kind {kind!r}")

    n_fil = int(params.get("n_filaments", 1))
    n_seg = int(params.get("n_segments", 3))
    seg_lo, seg_hi = params.get("segment_length", (side / 4, side / 2))
    spacing = float(params.get("spacing", 1.0))
    thickness = float(params.get("thickness", 0.0))
    min_sep = float(params.get("min_separation", 0.0))
    if n_fil < 0 or n_seg < 1 or spacing <= 0 or thickness < 0 or min_sep < 0 or seg_lo <= 0 or seg_hi < seg_lo:
        raise ValueError("invalid filament parameters")
    box_lo, box_hi = lo + margin + thickness, hi - margin - thickness
    if box_hi <= box_lo:
        raise ValueError("filament thickness/margin exceed the field of view")

    emitters = _EmitterList()
    segments = []
    placed = []
    for _ in range(n_fil):
        pt = rng.uniform(box_lo, box_hi, size=2)
        heading = rng.uniform(0, 2 * np.pi)
        carry = 0.0  # arc length left over from the previous segment
        for _ in range(n_seg):
            length = rng.uniform(seg_lo, seg_hi)
            heading += rng.normal(0.0, 0.5)
            end = pt + length * np.array([np.sin(heading), np.cos(heading)])
            # reflect off the box so filaments stay in the FOV
            for ax in range(2):
                if end[ax] < box_lo:
                    end[ax] = 2 * box_lo - end[ax]
                elif end[ax] > box_hi:
                    end[ax] = 2 * box_hi - end[ax]
            end = np.clip(end, box_lo, box_hi)
            seg_vec = end - pt
            seg_len = float(np.linalg.norm(seg_vec))
            segments.append((pt.copy(), end.copy()))
            if seg_len > 0:
                direction = seg_vec / seg_len
                normal = np.array([-direction[1], direction[0]])
                s = carry
                while s <= seg_len:
                    jitter = rng.uniform(-thickness, thickness) if thickness > 0 else 0.0
                    p = pt + s * direction + jitter * normal
                    if min_sep == 0 or not placed or \
                            np.min(np.linalg.norm(np.array(placed) - p, axis=1)) >= min_sep:
                        placed.append(p)
                        emitters.append(Emitter((float(p[0]), float(p[1])), photons, p_on))
                    s += spacing
                carry = s - seg_len
            heading = np.arctan2(seg_vec[0], seg_vec[1]) if seg_len > 0 else heading
            pt = end
    emitters.segments = segments
    return emitters


class _EmitterList(list):
    segments: list


def _render_frame(t, seed, op, noise, positions, photons, p_on, cells):
    rng = frame_rng(seed, t)
    active = rng.random(len(positions)) < p_on
    x = np.zeros(op.n_high)
    np.add.at(x, cells[active], photons[active])
    frame = _finish_frame(rng, op, x, noise)
    pts = np.column_stack([positions[active], photons[active]]) if len(positions) else np.zeros((0, 3))
    return frame, x, pts


def _finish_frame(rng, op, x, noise):
    clean = apply_forward(op, x) + noise.background
    if noise.poisson:
        frame = rng.poisson(np.maximum(clean, 0.0)).astype(np.float64)
    else:
        frame = clean
    if noise.gaussian_sigma > 0:
        frame = frame + rng.normal(0.0, noise.gaussian_sigma, size=frame.shape)
    return frame


def _geometry(op: MeasurementOperator) -> GridGeometry:
    if op.geometry is None:
        raise ValueError("rendering needs an operator built from a grid geometry")
    return op.geometry


def render_sequence(emitters, op: MeasurementOperator, noise: NoiseModel, T: int,
                    rng_seed: int, threads: int = 1):
    """Blinking SMLM movie: each emitter switches on independently per frame."""
    if T < 1:
        raise ValueError("T must be >= 1")
    geom = _geometry(op)
    positions = np.array([e.position for e in emitters], dtype=np.float64).reshape(-1, 2)
    photons = np.array([e.mean_photons for e in emitters], dtype=np.float64)
    p_on = np.array([e.on_probability for e in emitters], dtype=np.float64)
    cells = bin_positions(positions, geom.high_res_side)

    def job(t):
        return _render_frame(t, rng_seed, op, noise, positions, photons, p_on, cells)

    results = _run_frames(job, T, threads)
    m = geom.low_res_side
    frames = np.stack([r[0] for r in results]).reshape(T, m, m)
    truth = GroundTruth(list(emitters), np.stack([r[1] for r in results]), [r[2] for r in results])
    return FrameSequence(frames, geom, rng_seed), truth


def _run_frames(job, T, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(job, range(T)))
    return [job(t) for t in range(T)]


def render_ulm_sequence(density: float, op: MeasurementOperator, noise: NoiseModel, T: int,
                        rng_seed: int, amplitude: float = 1.0, threads: int = 1):
    """Microbubble movie: a fresh Poisson(``density``) set of bubbles per frame."""
    if density < 0:
        raise ValueError("density must be >= 0")
    if T < 1:
        raise ValueError("T must be >= 1")
    geom = _geometry(op)
    n = geom.high_res_side

    def job(t):
        rng = frame_rng(rng_seed, t, _ULM_STREAM)
        k = rng.poisson(density)
        pos = rng.uniform(-0.5, n - 0.5, size=(k, 2))
        x = np.zeros(op.n_high)
        np.add.at(x, bin_positions(pos, n), amplitude)
        frame = _finish_frame(rng, op, x, noise)
        return frame, x, np.column_stack([pos, np.full(k, float(amplitude))])

    results = _run_frames(job, T, threads)
    m = geom.low_res_side
    frames = np.stack([r[0] for r in results]).reshape(T, m, m)
    bubbles = [Emitter((float(p[0]), float(p[1])), float(amplitude), 1.0)
               for r in results for p in r[2]]
    truth = GroundTruth(bubbles, np.stack([r[1] for r in results]), [r[2] for r in results])
    return FrameSequence(frames, geom, rng_seed), truth
