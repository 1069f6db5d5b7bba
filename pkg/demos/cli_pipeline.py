"""Drive the full command-line pipeline from Python: simulate, solve, train, infer, eval, render.

Equivalent shell usage: sparseloc simulate --config sim.json --seed 1 --out run/sim
Run: python demos/cli_pipeline.py [output_dir]
"""
import json
import sys
import tempfile

from sparseloc import cli

root = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="sparseloc-")
psf = {"sigma": 1.0}
geom = {"low_res_side": 8, "ratio": 4}

cli.run("simulate", {"geometry": geom, "psf": psf, "frames": 200,
                     "structure": {"kind": "polyline-filament", "n_filaments": 2, "spacing": 6.0,
                                   "min_separation": 6.0, "margin": 3},
                     "noise": {"gaussian_sigma": 5.0, "background": 10.0}}, 1, f"{root}/sim")
res = cli.run("solve", {"frames": "sim/frames.slfr", "truth": "sim", "psf": psf,
                        "solver": "sparcom", "lam": 1.0}, 1, f"{root}/sparcom", base_dir=root)
print("sparcom:", json.dumps({k: res["metrics"][k] for k in ("precision", "recall", "jaccard")}))

cli.run("simulate", {"geometry": geom, "psf": psf, "frames": 100, "mode": "ulm", "density": 2.0,
                     "amplitude": 10.0, "noise": {"gaussian_sigma": 0.2}}, 2, f"{root}/ulm")
cli.run("train", {"dataset": "ulm", "net": {"kind": "ulm-conv"},
                  "data": {"patch_size": 8, "stride": 4, "blur_sigma": 1.0}, "epochs": 3},
        3, f"{root}/train", base_dir=root)
cli.run("infer", {"net": "train/net.slnt", "frames": "ulm/frames.slfr", "accumulate": False},
        3, f"{root}/infer", base_dir=root)
met = cli.run("eval", {"grid": "infer/grid.slfr", "truth": "ulm",
                       "eval": {"match": "per-frame", "threshold": 0.2}}, 3, f"{root}/eval", base_dir=root)
print("ulm-conv after 3 epochs:", json.dumps({k: met[k] for k in ("precision", "recall", "jaccard")}))
cli.run("render", {"grid": "sparcom/grid.slfr", "gamma": 2.2}, 0, f"{root}/render", base_dir=root)
print(f"outputs under {root}; image at {root}/render/image.pgm")
