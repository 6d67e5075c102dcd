"""Command-line interface.

Subcommands: ``train``, ``infer``, ``eval``, ``gradcheck``, ``params``.
Config files are plain ``key = value`` lines with ``#`` comments. Exits 0 on
success and nonzero with a single machine-parsable error line otherwise.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checks import run_gradient_suite
from .data import load_pairs
from .evaluate import evaluate_dataset, write_report_csv
from .imageio import read_gt_disparity, read_image
from .losses import LossWeights
from .network import (
    DEFAULT_DECODER_CHANNELS,
    DEFAULT_ENCODER_CHANNELS,
    DispNet,
    NetworkConfig,
    load_network,
    param_count,
)
from .train import TrainConfig, infer, train

CONFIG_KEYS = {
    "epochs": int,
    "lr": float,
    "lr_halve_epochs": "int_tuple",
    "beta1": float,
    "beta2": float,
    "eps": float,
    "batch_size": int,
    "crop_h": int,
    "crop_w": int,
    "seed": int,
    "num_scales": int,
    "data_workers": int,
    "variant": str,
    "encoder_channels": "int_tuple",
    "decoder_channels": "int_tuple",
    "disparity_fraction": float,
    "a_rec": float,
    "a_ds": float,
    "a_p": float,
    "a_a": float,
    "a_lr": float,
    "alpha": float,
    "perceptual_widths": "int_tuple",
    "perceptual_seed": int,
}


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = value
    return values


def _convert(key: str, raw: str):
    kind = CONFIG_KEYS[key]
    if kind == "int_tuple":
        return tuple(int(v) for v in raw.split(",") if v.strip())
    return kind(raw)


def train_config_from_file(path) -> TrainConfig:
    raw = parse_config_file(path) if path else {}
    vals = {key: _convert(key, value) for key, value in raw.items()}

    network = NetworkConfig(
        variant=vals.pop("variant", "rrdispnet_dtm"),
        encoder_channels=vals.pop("encoder_channels", DEFAULT_ENCODER_CHANNELS),
        decoder_channels=vals.pop("decoder_channels", DEFAULT_DECODER_CHANNELS),
        disparity_fraction=vals.pop("disparity_fraction", 0.3),
    )
    weights = LossWeights(
        rec=vals.pop("a_rec", 1.0),
        ds=vals.pop("a_ds", 0.1),
        p=vals.pop("a_p", 0.1),
        a=vals.pop("a_a", 0.2),
        lr=vals.pop("a_lr", 1.0),
        alpha=vals.pop("alpha", 0.85),
    )
    return TrainConfig(network=network, weights=weights, **vals)


def _gt_path_for(gt_dir: str, left_path: str) -> str:
    stem = os.path.splitext(os.path.basename(left_path))[0]
    for ext in (".pgm", ".png"):
        candidate = os.path.join(gt_dir, stem + ext)
        if os.path.exists(candidate):
            return candidate
    raise FileNotFoundError(f"no ground truth ({stem}.pgm/.png) in {gt_dir}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rrdispnet",
        description="Unsupervised stereo disparity training and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a stereo-pair manifest")
    p_train.add_argument("--config", help="key = value config file")
    p_train.add_argument("--manifest", required=True)
    p_train.add_argument("--out", required=True)

    p_infer = sub.add_parser("infer", help="run a checkpoint on one image")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--image", required=True)
    p_infer.add_argument("--pp", action="store_true", help="flip post-processing")
    p_infer.add_argument("--out", required=True)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint against ground truth")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--gt", required=True, help="directory of ground-truth disparity maps")
    p_eval.add_argument("--pp", action="store_true")
    p_eval.add_argument("--depth-space", action="store_true",
                        help="convert to metric depth before computing metrics")
    p_eval.add_argument("--focal", type=float, default=721.0)
    p_eval.add_argument("--baseline", type=float, default=0.54)
    p_eval.add_argument("--report", required=True, help="output CSV path")

    p_grad = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p_grad.add_argument("--seed", type=int, default=0)

    p_params = sub.add_parser("params", help="print the trainable parameter count")
    p_params.add_argument("--config", help="key = value config file")

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "train":
        config = train_config_from_file(args.config)
        final = train(config, args.manifest, args.out)
        print(final)
        return 0

    if args.command == "infer":
        image = read_image(args.image)
        stem = os.path.splitext(os.path.basename(args.image))[0]
        paths = infer(args.checkpoint, image, args.out, pp=args.pp, stem=stem)
        for key in ("disp_left", "disp_right", "mask_left", "mask_right", "meta"):
            print(paths[key])
        return 0

    if args.command == "eval":
        net = load_network(args.checkpoint)
        pairs = load_pairs(args.manifest)
        gt_maps = [
            read_gt_disparity(_gt_path_for(args.gt, sample.left_path)) for sample in pairs
        ]
        report = evaluate_dataset(
            net,
            pairs,
            gt_maps,
            pp=args.pp,
            depth_space=args.depth_space,
            focal=args.focal,
            baseline=args.baseline,
        )
        model = os.path.splitext(os.path.basename(args.checkpoint))[0]
        write_report_csv(args.report, [(model, report)])
        print(args.report)
        return 0

    if args.command == "gradcheck":
        return 0 if run_gradient_suite(seed=args.seed, verbose=True) else 1

    if args.command == "params":
        config = train_config_from_file(args.config)
        net = DispNet(config.network, seed=config.seed)
        print(param_count(net.params))
        return 0

    raise ValueError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
