"""Command-line entry point tying the laboratory together.

One executable with subcommands for data generation, training,
evaluation, cost analysis, and map export. Every run that owns an
output directory writes a run_config.json echo there before any real
work, so each result can be reproduced from its directory alone.

Exit codes: 0 success, 2 usage error, 3 missing or unreadable input,
4 bad checkpoint, 5 invalid configuration value, 6 training diverged.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from . import data as D
from . import model as M
from . import trainer as TR
from . import analysis as A

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_BAD_CHECKPOINT = 4
EXIT_BAD_CONFIG = 5
EXIT_DIVERGED = 6

_EXIT_TABLE = """\
exit codes:
  0  success
  2  usage error (unknown flag or subcommand)
  3  missing or unreadable input file/directory
  4  bad or mismatched checkpoint
  5  invalid configuration value
  6  training diverged (last good checkpoint kept)
"""

_PRESETS = {"toy": M.toy_config, "tiny": M.tiny_config, "structural": M.structural_config}
_DTYPES = {"float32": np.float32, "float64": np.float64}


def _write_echo(out_dir, command, payload):
    os.makedirs(out_dir, exist_ok=True)
    echo = {"command": command, "version": __version__}
    echo.update(payload)
    with open(os.path.join(out_dir, "run_config.json"), "w") as f:
        json.dump(echo, f, indent=2, sort_keys=True)
        f.write("\n")


def _resolve_model_config(args):
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"model config {args.config} does not exist")
        with open(args.config) as f:
            cfg = M.FFNetConfig.from_json(f.read())
    else:
        cfg = _PRESETS[args.preset]()
    overrides = {}
    if getattr(args, "fusion", None):
        overrides["fusion"] = args.fusion
    if getattr(args, "no_ftm", False):
        overrides["use_ftm"] = False
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _load_model(checkpoint, config_path):
    if not os.path.exists(checkpoint):
        raise FileNotFoundError(f"checkpoint {checkpoint} does not exist")
    if config_path is None:
        config_path = os.path.join(os.path.dirname(checkpoint) or ".", "model_config.json")
    if not os.path.exists(config_path):
        raise FileNotFoundError(
            f"model config {config_path} does not exist (pass --model-config)")
    with open(config_path) as f:
        cfg = M.FFNetConfig.from_json(f.read())
    arrays = TR.read_checkpoint_arrays(checkpoint)
    dtype = next(iter(arrays.values())).dtype if arrays else np.float64
    net = M.build_model(cfg, seed=0, dtype=dtype)
    try:
        net.load_state_dict(arrays)
    except (KeyError, ValueError) as e:
        raise TR.CheckpointError(f"{checkpoint}: does not match {config_path} ({e})")
    return net


def _read_image(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"image {path} does not exist")
    return D.read_pgm(path)


def cmd_gen_data(args):
    scene = D.SceneConfig(
        height=args.size, width=args.size, parent_rate=args.parent_rate,
        offspring_mean=args.offspring_mean, offset_sigma=args.offset_sigma,
        noise_std=args.noise_std, seed=args.seed)
    _write_echo(args.out, "gen-data", {"count": args.count, "scene": scene.to_dict()})
    manifest = D.write_dataset(args.out, scene, args.count)
    total = sum(e["count"] for e in manifest["scenes"])
    print(f"wrote {args.count} scenes ({total} heads) to {args.out}")
    return EXIT_OK


def cmd_train(args):
    model_cfg = _resolve_model_config(args)
    train_cfg = TR.TrainConfig(
        lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
        steps=args.steps, seed=args.seed, crop=args.crop,
        eval_every=args.eval_every)
    _write_echo(args.out, "train", {
        "data": args.data,
        "dtype": args.dtype,
        "model": json.loads(model_cfg.to_json()),
        "train": dataclasses.asdict(train_cfg),
    })
    with open(os.path.join(args.out, "model_config.json"), "w") as f:
        f.write(model_cfg.to_json())
        f.write("\n")

    samples, _, _ = D.read_dataset(args.data)
    net = M.build_model(model_cfg, seed=args.seed, dtype=_DTYPES[args.dtype])
    result = TR.train(net, samples, train_cfg, out_dir=args.out)
    final = result.curve[-1]["total"] if result.curve else float("nan")
    report = TR.evaluate(net, samples)
    print(f"trained {result.steps} steps; final loss {final:.6f}; "
          f"train MAE {report.mae:.4f}, MSE {report.mse:.4f}")
    return EXIT_OK


def _print_report(report):
    print("image  true      predicted  error")
    for i, (c, p) in enumerate(report.rows):
        print(f"{i:<5d}  {c:<8.1f}  {p:<9.3f}  {c - p:+.3f}")
    print(f"MAE {report.mae:.4f}  MSE {report.mse:.4f}  N {report.n_images}")


def cmd_eval(args):
    net = _load_model(args.checkpoint, args.model_config)
    samples, _, _ = D.read_dataset(args.data)
    report = TR.evaluate(net, samples)
    _print_report(report)
    if args.out:
        _write_echo(args.out, "eval", {"data": args.data, "checkpoint": args.checkpoint})
        with open(os.path.join(args.out, "metrics.json"), "w") as f:
            json.dump(report.to_dict(), f, indent=2)
            f.write("\n")
    return EXIT_OK


def cmd_analyze(args):
    cfg = _resolve_model_config(args)
    if args.input_shape:
        shape = tuple(int(v) for v in args.input_shape.split(","))
        if len(shape) != 4:
            raise ValueError(f"--input-shape needs n,c,h,w, got {args.input_shape!r}")
    else:
        shape = (1, cfg.in_channels, 512, 512)
    report = A.count_params_flops(cfg, shape)
    print(report.table())
    if args.out:
        _write_echo(args.out, "analyze", {
            "input_shape": list(shape), "model": json.loads(cfg.to_json())})
        with open(os.path.join(args.out, "analysis.json"), "w") as f:
            f.write(report.to_json())
            f.write("\n")
    return EXIT_OK


def _branch_list(value):
    if value == "all":
        return [1, 2, 3]
    return [int(value)] if value in ("1", "2", "3") else [value]


def cmd_erf(args):
    if args.checkpoint:
        net = _load_model(args.checkpoint, args.model_config)
    else:
        net = M.build_model(_resolve_model_config(args), seed=args.seed)
    _write_echo(args.out, "erf", {
        "checkpoint": args.checkpoint, "branch": args.branch,
        "probes": args.probes, "size": args.size, "seed": args.seed})
    for branch in _branch_list(args.branch):
        erf = A.effective_receptive_field(net, branch, probes=args.probes,
                                          size=args.size, seed=args.seed)
        path = os.path.join(args.out, f"erf_branch_{branch}.pgm")
        D.write_pgm(path, erf.values)
        print(f"branch {branch}: area {A.erf_area(erf)} cells "
              f"at threshold 0.05 -> {path}")
    return EXIT_OK


def cmd_heatmap(args):
    net = _load_model(args.checkpoint, args.model_config)
    image = _read_image(args.image)
    _write_echo(args.out, "heatmap", {
        "checkpoint": args.checkpoint, "image": args.image, "branch": args.branch})
    for branch in _branch_list(args.branch):
        if branch not in (1, 2, 3):
            raise ValueError(f"heatmap branch must be 1, 2, or 3, got {branch!r}")
        path = os.path.join(args.out, f"heatmap_branch_{branch}.pgm")
        A.branch_heatmap(net, image, branch, path=path)
        print(f"branch {branch} -> {path}")
    return EXIT_OK


def cmd_export_density(args):
    net = _load_model(args.checkpoint, args.model_config)
    image = _read_image(args.image)
    _write_echo(args.out, "export-density", {
        "checkpoint": args.checkpoint, "image": args.image})
    prefix = os.path.join(args.out, "density")
    count, _ = A.export_density(net, image, prefix)
    print(f"predicted count {count:.3f} -> {prefix}.pgm, {prefix}.csv")
    return EXIT_OK


def _add_model_source(p, default_preset="toy"):
    p.add_argument("--config", help="model config JSON file")
    p.add_argument("--preset", choices=sorted(_PRESETS), default=default_preset,
                   help=f"built-in model preset (default {default_preset})")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fflab",
        description="Desk-scale crowd-counting laboratory.",
        epilog=_EXIT_TABLE,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"fflab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=8)
    g.add_argument("--size", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--parent-rate", type=float, default=4.0)
    g.add_argument("--offspring-mean", type=float, default=6.0)
    g.add_argument("--offset-sigma", type=float, default=12.0)
    g.add_argument("--noise-std", type=float, default=0.02)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    _add_model_source(t)
    t.add_argument("--fusion", choices=("concat", "add", "stepwise"),
                   help="override the fusion strategy")
    t.add_argument("--no-ftm", action="store_true",
                   help="bypass the focus transitions (ablation)")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=0.005)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--crop", type=int, default=256)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--eval-every", type=int, default=0)
    t.add_argument("--dtype", choices=sorted(_DTYPES), default="float32")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--model-config", help="defaults to model_config.json beside the checkpoint")
    e.add_argument("--out", help="also write metrics.json here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="parameter/MAC/FLOP accounting")
    _add_model_source(a, default_preset="structural")
    a.add_argument("--fusion", choices=("concat", "add", "stepwise"))
    a.add_argument("--no-ftm", action="store_true")
    a.add_argument("--input-shape", help="n,c,h,w (default 1,<channels>,512,512)")
    a.add_argument("--out", help="also write analysis.json here")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("erf", help="effective receptive field maps")
    r.add_argument("--checkpoint", help="omit to probe a freshly initialized model")
    r.add_argument("--model-config")
    _add_model_source(r)
    r.add_argument("--branch", default="all",
                   choices=("1", "2", "3", "fused", "density", "all"))
    r.add_argument("--probes", type=int, default=16)
    r.add_argument("--size", type=int, default=64)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_erf)

    h = sub.add_parser("heatmap", help="per-branch feature heatmaps")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--model-config")
    h.add_argument("--image", required=True, help="input PGM image")
    h.add_argument("--branch", default="all", choices=("1", "2", "3", "all"))
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_heatmap)

    x = sub.add_parser("export-density", help="predicted density map as PGM + CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--model-config")
    x.add_argument("--image", required=True, help="input PGM image")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_density)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TR.TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except TR.CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CHECKPOINT
    except (FileNotFoundError, D.DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
