"""``sparseloc`` command line: simulate | solve | train | infer | eval | render.

Every subcommand reads a JSON config (validated against a published schema,
unknown keys rejected), writes its artefacts into ``--out`` and finishes
with a ``manifest.json`` holding the fully resolved config and seed.

Exit codes: 0 ok, 2 config error, 3 numeric divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys

import jsonschema
import numpy as np

from . import fileio as slio
from .evaluate import compute_metrics, extract_localizations, match_points
from .model import ConvergenceError, GaussianPsf, GridGeometry, build_measurement_matrix
from .simulate import (
    Emitter,
    FrameSequence,
    GroundTruth,
    NoiseModel,
    render_sequence,
    render_ulm_sequence,
    sample_structure,
)
from .solvers import (
    IstaConfig,
    empirical_covariance,
    fista,
    ista,
    sparcom_ista,
    sparcom_precompute,
)
from .train import (
    DivergenceError,
    NonFiniteError,
    OptimizerConfig,
    make_covariance_samples,
    make_patches,
    train_net,
)
from .unrolled import (
    accumulate_frames,
    conv_net_forward,
    init_conv_net,
    init_lista_from_model,
    lista_forward,
    upsample_nearest,
)

log = logging.getLogger("sparseloc")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4

LAMBDA_PRESETS = {"strong": 0.25, "weak": 0.05}
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


# -- schemas ------------------------------------------------------------------

def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_PATH = {"type": "string", "minLength": 1}

_PSF = _obj({"sigma": _POS, "truncation_radius": {"type": ["number", "null"], "exclusiveMinimum": 0}},
            ["sigma"])
_GEOMETRY = _obj({"low_res_side": _INT1, "ratio": _INT1}, ["low_res_side", "ratio"])
_NOISE = _obj({"gaussian_sigma": _NONNEG, "background": _NONNEG, "poisson": {"type": "boolean"}})
_EVAL = _obj({"radius": _POS, "threshold": _NONNEG, "relative_threshold": {"type": "boolean"},
              "min_separation": _NONNEG, "match": {"enum": ["static", "per-frame"]}})
_STRUCTURE = _obj({
    "kind": {"enum": ["uniform-points", "polyline-filament"]},
    "count": {"type": "integer", "minimum": 0},
    "n_filaments": {"type": "integer", "minimum": 0},
    "n_segments": _INT1,
    "segment_length": {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2},
    "spacing": _POS,
    "thickness": _NONNEG,
    "margin": _NONNEG,
    "min_separation": _NONNEG,
    "mean_photons": _POS,
    "on_probability": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
}, ["kind"])
_EMITTER = _obj({"x": _NUM, "y": _NUM, "mean_photons": _POS,
                 "on_probability": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
                ["x", "y"])

SCHEMAS = {
    "simulate": _obj({
        "seed": {"type": "integer", "minimum": 0},
        "geometry": _GEOMETRY,
        "psf": _PSF,
        "noise": _NOISE,
        "frames": _INT1,
        "mode": {"enum": ["smlm", "ulm"]},
        "structure": _STRUCTURE,
        "emitters": {"type": "array", "items": _EMITTER},
        "density": _NONNEG,
        "amplitude": _POS,
    }, ["geometry", "psf", "frames"]),
    "solve": _obj({
        "seed": {"type": "integer", "minimum": 0},
        "frames": _PATH,
        "truth": _PATH,
        "psf": _PSF,
        "solver": {"enum": ["ista", "fista", "sparcom"]},
        "lam": {"oneOf": [_NONNEG, {"enum": sorted(LAMBDA_PRESETS)}]},
        "max_iters": _INT1,
        "stop_tol": _NONNEG,
        "nonneg": {"type": "boolean"},
        "accumulate": {"type": "boolean"},
        "max_high_res": _INT1,
        "eval": _EVAL,
    }, ["frames", "psf", "solver"]),
    "train": _obj({
        "seed": {"type": "integer", "minimum": 0},
        "dataset": _PATH,
        "psf": _PSF,
        "net": _obj({
            "kind": {"enum": ["lista-dense", "lsparcom-conv", "ulm-conv"]},
            "layers": _INT1,
            "filter_size": {"type": "integer", "minimum": 1},
            "filter_std": _NONNEG,
            "threshold_init": _NONNEG,
            "beta_init": _POS,
            "train_beta": {"type": "boolean"},
            "lam": _NONNEG,
        }, ["kind"]),
        "data": _obj({"patch_size": _INT1, "stride": _INT1, "blur_sigma": _NONNEG,
                      "frames_per_sample": {"type": "integer", "minimum": 2},
                      "normalize": {"type": "boolean"}}),
        "optimizer": _obj({"method": {"enum": ["adam", "sgd"]}, "learning_rate": _NONNEG,
                           "beta1": _NONNEG, "beta2": _NONNEG, "eps": _POS, "batch_size": _INT1}),
        "epochs": {"type": "integer", "minimum": 0},
    }, ["dataset", "net", "epochs"]),
    "infer": _obj({
        "seed": {"type": "integer", "minimum": 0},
        "net": _PATH,
        "frames": _PATH,
        "accumulate": {"type": "boolean"},
    }, ["net", "frames"]),
    "eval": _obj({
        "seed": {"type": "integer", "minimum": 0},
        "grid": _PATH,
        "truth": _PATH,
        "eval": _EVAL,
    }, ["grid", "truth"]),
    "render": _obj({
        "seed": {"type": "integer", "minimum": 0},
        "grid": _PATH,
        "frame": {"type": "integer", "minimum": 0},
        "gamma": _POS,
    }, ["grid"]),
}

_EVAL_DEFAULTS = {"radius": None, "threshold": 0.3, "relative_threshold": True,
                  "min_separation": 0.0, "match": "static"}


def load_config(command: str, path) -> dict:
    """Parse and validate a JSON config for ``command``."""
    if path is None:
        cfg = {}
    else:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    validate_config(command, cfg)
    return cfg


def validate_config(command: str, cfg) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMAS[command])
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{where}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))


# -- helpers ------------------------------------------------------------------

def _psf(cfg) -> GaussianPsf:
    p = cfg["psf"]
    return GaussianPsf(p["sigma"], p.get("truncation_radius"))


def _geometry_from_header(m: int, n: int) -> GridGeometry:
    if n % m:
        raise ConfigError(f"frame file has N={n} not a multiple of M={m}")
    return GridGeometry(m, n // m)


def _path(base_dir, p):
    return p if os.path.isabs(p) or base_dir is None else os.path.join(base_dir, p)


def _manifest(out, command, cfg, seed, outputs, extra=None):
    doc = {"command": command, "config": cfg, "seed": seed, "outputs": sorted(outputs),
           "format_version": FORMAT_VERSION}
    if extra:
        doc.update(extra)
    slio.write_json(os.path.join(out, "manifest.json"), doc)


def _resolve_lambda(value):
    if isinstance(value, str):
        return LAMBDA_PRESETS[value], value
    return float(value), None


# -- simulate -----------------------------------------------------------------

def cmd_simulate(cfg: dict, seed: int, out: str, threads: int = 1) -> dict:
    """Render a sequence and its truth: ``frames.slfr``, ``truth.slfr``, CSVs, manifest."""
    geom = GridGeometry(cfg["geometry"]["low_res_side"], cfg["geometry"]["ratio"])
    op = build_measurement_matrix(_psf(cfg), geom)
    noise = NoiseModel(**cfg.get("noise", {}))
    mode = cfg.get("mode", "smlm")
    if mode == "ulm":
        if "structure" in cfg or "emitters" in cfg:
            raise ConfigError("ulm mode draws fresh bubbles per frame; drop structure/emitters")
        seq, truth = render_ulm_sequence(cfg.get("density", 0.0), op, noise, cfg["frames"],
                                         seed, cfg.get("amplitude", 1.0), threads)
    else:
        if "density" in cfg or "amplitude" in cfg:
            raise ConfigError("density/amplitude apply to ulm mode only")
        emitters = _emitters(cfg, geom, seed)
        seq, truth = render_sequence(emitters, op, noise, cfg["frames"], seed, threads)
    n = geom.high_res_side
    slio.write_frames(os.path.join(out, "frames.slfr"), seq.frames, n)
    slio.write_frames(os.path.join(out, "truth.slfr"), truth.per_frame_x.reshape(-1, n, n))
    slio.write_emitters_csv(os.path.join(out, "emitters.csv"), truth.emitters)
    slio.write_points_csv(os.path.join(out, "truth_points.csv"), truth.frame_points)
    outputs = ["frames.slfr", "truth.slfr", "emitters.csv", "truth_points.csv"]
    _manifest(out, "simulate", cfg, seed, outputs)
    return {"sequence": seq, "truth": truth}


def _emitters(cfg, geom, seed):
    if "structure" in cfg and "emitters" in cfg:
        raise ConfigError("give either structure or emitters, not both")
    if "emitters" in cfg:
        return [Emitter((e["y"], e["x"]), e.get("mean_photons", 1000.0),
                        e.get("on_probability", 0.1)) for e in cfg["emitters"]]
    if "structure" in cfg:
        params = dict(cfg["structure"])
        kind = params.pop("kind")
        params.setdefault("side", geom.high_res_side)
        if "segment_length" in params:
            params["segment_length"] = tuple(params["segment_length"])
        return sample_structure(kind, params, seed)
    return []


# -- solve / eval ---------------------------------------------------------------

def cmd_solve(cfg: dict, seed: int, out: str, threads: int = 1, base_dir=None) -> dict:
    """ISTA/FISTA per frame (optionally accumulated) or SPARCOM on the whole sequence."""
    frames, n = slio.read_frames(_path(base_dir, cfg["frames"]))
    geom = _geometry_from_header(frames.shape[1], n)
    op = build_measurement_matrix(_psf(cfg), geom)
    lam, preset = _resolve_lambda(cfg.get("lam", 0.1))
    iters = cfg.get("max_iters", 100)
    solver = cfg["solver"]
    if solver == "sparcom":
        pre = sparcom_precompute(op, cfg.get("max_high_res", 8192))
        m = sparcom_ista(empirical_covariance(FrameSequence(frames, geom)), pre, lam, iters,
                         cfg.get("stop_tol", 0.0))
        grids = m.reshape(1, n, n)
    else:
        scfg = IstaConfig(lam, iters, cfg.get("stop_tol", 0.0), cfg.get("nonneg", False))
        fn = ista if solver == "ista" else fista
        est = [fn(op, f.ravel(), scfg)[0] for f in frames]
        if cfg.get("accumulate", True):
            grids = accumulate_frames(est).reshape(1, n, n)
        else:
            grids = np.stack(est).reshape(-1, n, n)
    if not np.all(np.isfinite(grids)):
        raise ConvergenceError(f"{solver} produced non-finite values")
    slio.write_frames(os.path.join(out, "grid.slfr"), grids)
    outputs = ["grid.slfr"]
    metrics = None
    if "truth" in cfg:
        metrics = evaluate_grid(grids, _path(base_dir, cfg["truth"]), cfg.get("eval", {}),
                                with_nmse=solver != "sparcom")
        slio.write_json(os.path.join(out, "metrics.json"), metrics)
        outputs.append("metrics.json")
    _manifest(out, "solve", cfg, seed, outputs, {"lam": lam, "lam_preset": preset})
    return {"grid": grids, "metrics": metrics}


def evaluate_grid(grids, truth_dir: str, eval_cfg: dict, with_nmse: bool = True) -> dict:
    """Flat metrics document for recovered ``grids`` against a simulate output directory.

    ``match="static"`` compares the (single or summed) grid with the unique
    emitter positions; ``"per-frame"`` matches each grid against that frame's
    truth points and pools the counts.  NMSE is reported only with
    ``with_nmse`` (SPARCOM estimates variances, not intensities).
    """
    ec = {**_EVAL_DEFAULTS, **eval_cfg}
    grids = np.asarray(grids, dtype=np.float64)
    truth_grids, _ = slio.read_frames(os.path.join(truth_dir, "truth.slfr"))
    if ec["radius"] is None:
        # one low-res pixel, expressed in high-res units
        m, n, _ = slio.read_frame_header(os.path.join(truth_dir, "frames.slfr"))
        ec["radius"] = float(n // m)
    if truth_grids.shape[1:] != grids.shape[1:]:
        raise ConfigError(f"grid is {grids.shape[1:]} but truth is {truth_grids.shape[1:]}")

    def locs(g, frame_id=None):
        thr = ec["threshold"] * g.max() if ec["relative_threshold"] else ec["threshold"]
        return extract_localizations(g, max(thr, 0.0), ec["min_separation"], frame_id)

    if ec["match"] == "static":
        pred = locs(grids.sum(axis=0))
        truth_pts = slio.read_emitters_csv(os.path.join(truth_dir, "emitters.csv"))[:, :2]
        match = match_points(pred, truth_pts, ec["radius"])
        truth_grid = truth_grids.sum(axis=0) if len(grids) == 1 else None
        pred_grid = grids.sum(axis=0)
    else:
        points = slio.read_points_csv(os.path.join(truth_dir, "truth_points.csv"),
                                      len(truth_grids))
        if len(grids) != len(points):
            raise ConfigError(f"{len(grids)} grids but {len(points)} truth frames")
        match = None
        for t, g in enumerate(grids):
            mt = match_points(locs(g, t), points[t], ec["radius"])
            match = mt if match is None else match + mt
        truth_grid, pred_grid = truth_grids, grids
    if not with_nmse:
        truth_grid = None
    try:
        metrics = compute_metrics(match, pred_grid, truth_grid) if truth_grid is not None \
            else compute_metrics(match)
    except ValueError:
        # NMSE undefined for an all-zero truth; report the detection metrics alone
        metrics = compute_metrics(match)
    doc = metrics.as_dict()
    doc["nmse"] = None if not np.isfinite(doc["nmse"]) else doc["nmse"]
    doc.update({"true_positives": match.true_positives, "false_positives": match.unmatched_pred,
                "false_negatives": match.unmatched_truth, "greedy_matching": match.greedy})
    return doc


def cmd_eval(cfg: dict, seed: int, out: str, threads: int = 1, base_dir=None) -> dict:
    grids, _ = slio.read_frames(_path(base_dir, cfg["grid"]))
    metrics = evaluate_grid(grids, _path(base_dir, cfg["truth"]), cfg.get("eval", {}))
    slio.write_json(os.path.join(out, "metrics.json"), metrics)
    _manifest(out, "eval", cfg, seed, ["metrics.json"])
    return metrics


# -- train / infer --------------------------------------------------------------

def _load_dataset(directory):
    frames, n = slio.read_frames(os.path.join(directory, "frames.slfr"))
    truth_grids, _ = slio.read_frames(os.path.join(directory, "truth.slfr"))
    geom = _geometry_from_header(frames.shape[1], n)
    points = slio.read_points_csv(os.path.join(directory, "truth_points.csv"), len(frames))
    truth = GroundTruth([], truth_grids.reshape(len(truth_grids), -1), points)
    return FrameSequence(frames, geom), truth


def cmd_train(cfg: dict, seed: int, out: str, threads: int = 1, base_dir=None) -> dict:
    """Train an unrolled net on a simulated dataset; writes ``net.slnt`` and ``loss.csv``."""
    seq, truth = _load_dataset(_path(base_dir, cfg["dataset"]))
    geom = seq.geometry
    nc = cfg["net"]
    dc = cfg.get("data", {})
    kind = nc["kind"]
    k = nc.get("layers", 10)
    patch = dc.get("patch_size", min(16, geom.low_res_side))
    stride = dc.get("stride", max(1, patch // 2))
    blur = dc.get("blur_sigma", 0.0)
    if kind == "lista-dense":
        if "psf" not in cfg:
            raise ConfigError("lista-dense training needs psf to initialise from the model")
        op = build_measurement_matrix(_psf(cfg), GridGeometry(patch, geom.ratio))
        net = init_lista_from_model(op, nc.get("lam", 0.1), k)
        samples = make_patches(seq, truth, patch, stride, seed, blur, flatten=True)
    else:
        net = init_conv_net(kind, geom, k, nc.get("filter_size", 5), seed,
                            nc.get("filter_std", 0.1), nc.get("threshold_init", 0.01),
                            nc.get("beta_init", 10.0), nc.get("train_beta", True))
        if kind == "ulm-conv":
            samples = make_patches(seq, truth, patch, stride, seed, blur)
        else:
            hr_patch = dc.get("patch_size", min(32, geom.high_res_side))
            hr_stride = dc.get("stride", max(1, hr_patch // 2))
            samples = make_covariance_samples(seq, truth, dc.get("frames_per_sample", seq.n_frames),
                                              hr_patch, hr_stride, seed, blur,
                                              dc.get("normalize", True))
    opt = OptimizerConfig(**cfg.get("optimizer", {}))
    result = train_net(net, samples, cfg["epochs"], opt, seed)
    slio.write_net(os.path.join(out, "net.slnt"), result.net)
    slio.write_loss_csv(os.path.join(out, "loss.csv"), result.losses)
    _manifest(out, "train", cfg, seed, ["net.slnt", "loss.csv"],
              {"initial_loss": result.initial_loss, "samples": len(samples)})
    return {"net": result.net, "losses": result.losses}


def infer_frames(net, frames, n: int, accumulate: bool) -> np.ndarray:
    """Per-frame forward passes (or one pass on ``G`` for ``lsparcom-conv``)."""
    g = net.geometry
    m = frames.shape[1]
    if net.kind == "lista-dense":
        n_low, n_high = net.params["w0.0"].shape[1], net.params["w0.0"].shape[0]
        if (n_low, n_high) != (m * m, n * n):
            raise ConfigError(f"net maps {n_low} -> {n_high} values but frames are "
                              f"{m}x{m} -> {n}x{n}")
    elif n != g.high_res_side or m != g.low_res_side:
        raise ConfigError(f"net geometry {g.low_res_side}->{g.high_res_side} does not match "
                          f"frames {m}->{n}")
    if net.kind == "lsparcom-conv":
        gy = empirical_covariance(frames).g_y.reshape(m, m)
        big = upsample_nearest(gy, g.ratio)
        scale = big.max() if big.max() > 0 else 1.0
        return conv_net_forward(net, big / scale)[None] * scale
    if net.kind == "lista-dense":
        est = lista_forward(net, frames.reshape(len(frames), -1)).reshape(-1, n, n)
    else:
        est = conv_net_forward(net, frames)
    if accumulate:
        return accumulate_frames(list(est))[None]
    return est


def cmd_infer(cfg: dict, seed: int, out: str, threads: int = 1, base_dir=None) -> dict:
    net = slio.read_net(_path(base_dir, cfg["net"]))
    frames, n = slio.read_frames(_path(base_dir, cfg["frames"]))
    grids = infer_frames(net, frames, n, cfg.get("accumulate", True))
    if not np.all(np.isfinite(grids)):
        raise NonFiniteError("network output is not finite")
    slio.write_frames(os.path.join(out, "grid.slfr"), grids)
    _manifest(out, "infer", cfg, seed, ["grid.slfr"])
    return {"grid": grids}


# -- render -------------------------------------------------------------------

def render_pgm(grid, gamma: float = 1.0) -> bytes:
    """16-bit binary PGM (big-endian samples), min-max normalised then ``v ** (1/gamma)``."""
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("render needs a single 2-D grid")
    lo, hi = float(g.min()), float(g.max())
    if hi > lo:
        v = ((g - lo) / (hi - lo)) ** (1.0 / gamma)
        pix = np.rint(v * 65535.0).astype(">u2")
    else:
        log.warning("grid has no dynamic range; rendering flat mid-gray")
        pix = np.full(g.shape, 32768, dtype=">u2")
    h, w = g.shape
    return f"P5\n{w} {h}\n65535\n".encode("ascii") + pix.tobytes()


def cmd_render(cfg: dict, seed: int, out: str, threads: int = 1, base_dir=None) -> dict:
    grids, _ = slio.read_frames(_path(base_dir, cfg["grid"]))
    t = cfg.get("frame", 0)
    if t >= len(grids):
        raise ConfigError(f"frame {t} out of range for a {len(grids)}-frame file")
    data = render_pgm(grids[t], cfg.get("gamma", 1.0))
    slio.atomic_write(os.path.join(out, "image.pgm"), data)
    _manifest(out, "render", cfg, seed, ["image.pgm"])
    return {"image": data}


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "train": cmd_train,
            "infer": cmd_infer, "eval": cmd_eval, "render": cmd_render}


def run(command: str, cfg: dict, seed: int | None = None, out: str = ".",
        threads: int = 1, base_dir=None) -> dict:
    """Library entry point used by ``main``: validate, resolve the seed and dispatch."""
    validate_config(command, cfg)
    cfg = copy.deepcopy(cfg)
    if seed is None:
        seed = cfg.get("seed", 0)
    cfg["seed"] = int(seed)
    os.makedirs(out, exist_ok=True)
    fn = COMMANDS[command]
    if command == "simulate":
        return fn(cfg, int(seed), out, threads)
    return fn(cfg, int(seed), out, threads, base_dir)


def _parser():
    ap = argparse.ArgumentParser(prog="sparseloc", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--seed", type=int, help="RNG seed (overrides the config)")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--threads", type=int, default=1, help="worker threads")
    ap.add_argument("--print-schema", action="store_true", help="print the config schema and exit")
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = _parser().parse_args(argv)
    if args.print_schema:
        print(json.dumps(SCHEMAS[args.command], indent=2, sort_keys=True))
        return EXIT_OK
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.command, args.config)
        base = os.path.dirname(os.path.abspath(args.config)) if args.config else None
        run(args.command, cfg, args.seed, args.out, args.threads, base)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError, ConvergenceError, FloatingPointError) as exc:
        log.error("numeric divergence: %s", exc)
        return EXIT_DIVERGENCE
    except OSError as exc:  # includes FormatError
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except MemoryError as exc:
        # the SPARCOM memory guard: the configured geometry is too large
        log.error("%s", exc)
        return EXIT_CONFIG
    except ValueError as exc:
        # library preconditions violated by config values (e.g. margin too large)
        log.error("invalid config value: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
