"""Command line: train, eval, predict, inspect, make-synth.

Exit codes: 0 success, 1 usage/configuration, 2 data, 3 numeric or per-image failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .backbone.base import LATENT_SCALE, PYRAMID_REDUCTION
from .data import load_image, pool_density, rasterize_density, synth_dataset, write_corpus
from .data.augment import reflect_pad
from .errors import CheckpointError, ConfigError, IngestionError, InputError, NumericError
from .evalrunner import (model_predictor, oracle_predictor, run_benchmark, sliding_window_maps,
                         write_report)
from .model import build_model
from .supervision import LossWeights, fuse_attention, pna_map
from .trainer import eval_samples, fit, load_trained
from . import viz

log = logging.getLogger("t2icount")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEVICE_ENV = "T2ICOUNT_DEVICE"


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def device():
    return torch.device(os.environ.get(DEVICE_ENV, "cpu"))


def _config(args):
    cfg = config_mod.load_config(args.config, args.set)
    return cfg


def _echo_config(cfg, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump(cfg, out / "effective_config.yaml")


def _load_model(args, cfg):
    if args.checkpoint:
        model, cfg = load_trained(args.checkpoint, args.set)
    else:
        model = build_model(config_mod.apply_variant(cfg))
    return model.to(device()).eval(), cfg


def _read_image(path):
    try:
        return load_image(path)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc


def cmd_train(args):
    cfg = _config(args)
    _echo_config(cfg, args.out)
    log.info("effective config: %s", json.dumps(cfg, default=str))
    result = fit(cfg, out_dir=args.out, resume=not args.no_resume)
    log.info("finished %d steps, best val MAE %.3f (epoch %d)", result.steps, result.best_mae, result.best_epoch)
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    if args.checkpoint == "oracle":
        predict = oracle_predictor(cfg["data"]["sigma"])
    else:
        model, cfg = _load_model(args, cfg)
        predict = model_predictor(model, cfg["eval"]["window"], cfg["eval"]["stride"])
    _echo_config(cfg, args.out)
    dataset = args.dataset or cfg["data"]["dataset"]
    samples, mode = eval_samples(cfg, dataset, args.split)
    result = run_benchmark(predict, samples, dataset, mode, config_mod.config_hash(cfg))
    summary = write_report(result, args.out, args.split, method=args.checkpoint or "untrained")
    print(json.dumps(summary))
    return EXIT_OK if not result.failures else EXIT_NUMERIC


def cmd_predict(args):
    cfg = _config(args)
    model, cfg = _load_model(args, cfg)
    image = _read_image(args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    maps = sliding_window_maps(model.maps, image, args.prompt, cfg["eval"]["window"], cfg["eval"]["stride"])
    count = float(maps["density"].sum())
    if not math.isfinite(count):
        raise NumericError("predicted count is not finite")
    stem = Path(args.image).stem
    viz.overlay(image, maps["density"]).save(out / f"{stem}_density.png")
    for name, m in maps.items():
        if name.startswith("S"):
            viz.overlay(image, m, vmin=-1.0, vmax=1.0).save(out / f"{stem}_{name}.png")
    record = {"image": str(args.image), "prompt": args.prompt, "count": round(count, 2),
              "checkpoint": args.checkpoint, "seed": cfg["eval"]["seed"]}
    (out / f"{stem}_prediction.json").write_text(json.dumps(record, indent=2))
    print(json.dumps(record))
    return EXIT_OK


def _pad_for_pyramid(image):
    """Reflect-pad right/bottom so the latent supports a 4-level pyramid."""
    m = LATENT_SCALE * PYRAMID_REDUCTION
    h, w = image.shape[-2:]
    return reflect_pad(image, math.ceil(h / m) * m, math.ceil(w / m) * m)


def cmd_inspect(args):
    cfg = _config(args)
    model, cfg = _load_model(args, cfg)
    weights = LossWeights.from_config(cfg)
    theta = weights.theta if args.theta is None else args.theta
    tau = weights.tau if args.tau is None else args.tau
    image = _read_image(args.image)
    h, w = image.shape[-2:]
    image = _pad_for_pyramid(image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        result = model.infer(image, args.prompt)
    lh, lw = math.ceil(h / LATENT_SCALE), math.ceil(w / LATENT_SCALE)
    # fuse and threshold over the padded latent, then drop the padded cells
    A_full = fuse_attention(result.attention, weights.fusion_weights)[0].cpu()
    A = A_full[:lh, :lw]
    stem = Path(args.image).stem
    viz.gray_image(A.numpy()).save(out / f"{stem}_attention.png")
    viz.gray_image(viz.pseudo_background(A.numpy(), theta).astype(float)).save(out / f"{stem}_background.png")
    files = {"attention": f"{stem}_attention.png", "background": f"{stem}_background.png"}
    if args.points:
        pts = np.asarray(json.loads(Path(args.points).read_text()), dtype=np.float64).reshape(-1, 2)
        ph, pw = image.shape[-2:]
        D = torch.from_numpy(pool_density(rasterize_density(pts, (ph, pw), cfg["data"]["sigma"]), LATENT_SCALE)).float()
        P = pna_map(D, A_full, tau, theta)[:lh, :lw]
        viz.pna_image(P.numpy()).save(out / f"{stem}_pna.png")
        files["pna"] = f"{stem}_pna.png"
    else:
        log.warning("no ground-truth points given: rendering attention and pseudo-background only")
    print(json.dumps({"tau": tau, "theta": theta, "files": files}))
    return EXIT_OK


def cmd_make_synth(args):
    cfg = _config(args)
    corpus = synth_dataset(cfg["data"]["synth"], cfg["data"]["synth"]["seed"])
    root = write_corpus(corpus, args.out)
    print(json.dumps({"root": str(root), **{k: len(v) for k, v in corpus.items()}}))
    return EXIT_OK


def build_parser():
    parser = Parser(prog="t2icount", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(p, checkpoint=True):
        p.add_argument("--config", default=None, help="YAML file or bundled name (toy)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
        p.add_argument("--out", required=True, help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("train", help="train a model")
    common(p, checkpoint=False)
    p.add_argument("--no-resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="benchmark a checkpoint ('oracle' for the ground-truth counter)")
    common(p)
    p.add_argument("--dataset", default=None,
                   choices=["synth", "synth-minority", "fsc147", "fsc147s", "carpk"])
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="count one image")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="render fused attention, pseudo-background and PNA maps")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--points", default=None, help="JSON list of [x, y] ground-truth points")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--theta", type=float, default=None)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("make-synth", help="write the synthetic corpus to disk")
    common(p, checkpoint=False)
    p.set_defaults(func=cmd_make_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, InputError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (IngestionError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
