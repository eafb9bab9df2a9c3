"""Command-line surface: simulate / train / eval / complete / gradcheck.

Every subcommand echoes its effective configuration (and writes it next to
its outputs), so two runs with identical echoes produce identical primary
outputs. Exit codes are stable: 0 ok, 1 check failure, 2 configuration
error, 3 I/O error, 4 numeric abort, 5 alignment error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from . import kittiio
from .config import ConfigError, apply_settings, echo_lines, parse_config_file
from .loss import aggregate_metrics, evaluate_sample, write_report
from .model import FusionNet, ModelConfig, load_checkpoint
from .simdata import SceneSpec, generate_corpus
from .tensor import NonFinite
from .train import (STAGES, NumericAbort, TrainConfig, load_corpus,
                    predict_depth, staged_training, train_loop)

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_ALIGNMENT = 5


def _build_roots(args) -> dict:
    """Defaults <- config file <- --set overrides; flags are applied later."""
    roots = {
        "scene": SceneSpec(),
        "train": TrainConfig(),
        "model": ModelConfig(dtype="float32"),
    }
    if getattr(args, "config", None):
        apply_settings(roots, parse_config_file(args.config))
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    apply_settings(roots, overrides)
    return roots


def _echo_config(roots: dict, out_dir=None) -> None:
    text = echo_lines(roots)
    sys.stdout.write("# effective configuration\n" + text)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "effective_config.txt").write_text(text, encoding="utf-8")


def cmd_simulate(args) -> int:
    roots = _build_roots(args)
    scene = roots["scene"]
    if args.seed is not None:
        scene.seed = args.seed
    count = args.count
    if count is None:
        raise ConfigError("simulate requires --count")
    if count < 1:
        raise ConfigError(f"--count must be >= 1, got {count}")
    _echo_config({"scene": scene}, args.out)
    stats = generate_corpus(count, scene, scene.seed, args.out)
    print(f"wrote {stats['count']} samples ({stats['train_count']} train / "
          f"{stats['val_count']} val) to {args.out}")
    print(f"manifest: {stats['manifest']}")
    print(f"mean lidar fill: {stats['lidar_fill_mean']:.3f}  "
          f"mean gt fill: {stats['gt_fill_mean']:.3f}  "
          f"mean corrupted pixels/sample: {stats['artifact_pixels_mean']:.1f}")
    return EXIT_OK


def _load_model_for_training(roots, resume: str = None) -> FusionNet:
    if resume:
        return load_checkpoint(resume)
    model_cfg = roots["model"]
    if roots["train"].guidance_skip:
        model_cfg.guidance_skip = True
    return FusionNet(model_cfg)


def cmd_train(args) -> int:
    roots = _build_roots(args)
    tcfg: TrainConfig = roots["train"]
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    if args.seed is not None:
        tcfg.seed = args.seed
        roots["model"].seed = args.seed
    if args.stage not in STAGES:
        raise ConfigError(f"--stage must be one of {STAGES}, got {args.stage!r}")
    _echo_config(roots, args.out)

    corpus = load_corpus(args.corpus, crop_h=args.crop_h)
    model = _load_model_for_training(roots, args.resume)
    t0 = time.perf_counter()
    if args.stage == "staged":
        history = staged_training(model, corpus, tcfg, out_dir=args.out)
    else:
        history = train_loop(model, corpus, tcfg, stage=args.stage, out_dir=args.out)
    wall = time.perf_counter() - t0
    if history:
        last = history[-1]
        print(f"trained {len(history)} epochs in {wall:.1f}s; final "
              f"val RMSE {last['val_rmse_mm']:.1f} mm, MAE {last['val_mae_mm']:.1f} mm")
    else:
        print(f"no epochs requested; wrote initialization checkpoint in {wall:.1f}s")
    print(f"checkpoints and log in {args.out}")
    return EXIT_OK


_ABLATE_STAGE = {"fused": "end2end", "local-only": "local", "global-only": "global"}


def cmd_eval(args) -> int:
    roots = _build_roots(args)
    _echo_config(roots, args.out)
    model = load_checkpoint(args.checkpoint)
    stage = _ABLATE_STAGE[args.ablate]
    wanted = None if args.split == "all" else args.split
    entries = [e for e in kittiio.read_manifest(args.corpus)
               if wanted is None or e[1] == wanted]
    if not entries:
        raise kittiio.IoError(f"no samples with split {args.split!r} in {args.corpus}")
    records = []
    for sample_id, _ in entries:
        sample = kittiio.read_sample(args.corpus, sample_id, crop_h=args.crop_h)
        pred = predict_depth(model, sample, stage=stage)
        records.append(evaluate_sample(sample_id, pred, sample.gt,
                                       sample.dense_truth, sample.artifact_mask))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = write_report(records, out_dir / "report.json", out_dir / "report.txt")
    agg = report["aggregate"]
    print(f"{args.ablate} on {args.split}: RMSE {agg['rmse_mm']:.1f} mm, "
          f"MAE {agg['mae_mm']:.1f} mm over {agg['sample_count']} samples")
    if "rmse_artifact_mm" in agg:
        print(f"artifact pixels: RMSE {agg['rmse_artifact_mm']:.1f} mm over "
              f"{agg['artifact_pixel_count']} px")
    print(f"report: {out_dir / 'report.json'}")
    return EXIT_OK


def cmd_complete(args) -> int:
    roots = _build_roots(args)
    _echo_config(roots)
    model = load_checkpoint(args.checkpoint)
    rgb = kittiio.read_rgb_png(args.rgb)
    lidar = kittiio.read_depth_png(args.lidar)
    if rgb.shape[1:] != lidar.shape:
        raise kittiio.AlignmentError(f"rgb {rgb.shape[1:]} vs lidar {lidar.shape}")
    from .simdata import SceneSample
    sample = SceneSample(rgb=rgb, lidar=lidar, gt=np.zeros_like(lidar))
    t0 = time.perf_counter()
    pred = predict_depth(model, sample, stage="end2end")
    wall_ms = (time.perf_counter() - t0) * 1000.0
    # densify to the codec's positive range: every output pixel is a valid depth
    pred = np.clip(pred, 1.0 / 256.0, kittiio.MAX_DEPTH_M)
    kittiio.write_depth_png(pred, args.out)
    print(f"completed depth written to {args.out} ({wall_ms:.1f} ms inference)")
    if args.vis:
        vis_path = kittiio.export_visualization(pred, Path(args.out).with_suffix(".vis.png"))
        print(f"visualization: {vis_path}")
    if args.truth:
        truth = kittiio.read_depth_png(args.truth)
        from .loss import rmse
        mask = (truth > 0).astype(np.float64)
        print(f"RMSE vs truth: {rmse(pred, truth, mask):.1f} mm")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    print(f"# gradcheck seed = {args.seed}")
    results = gradcheck_mod.run_suite(args.seed)
    failures = 0
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"{status}  {r.name:<28} max_rel_err {r.max_rel_err:.3e} "
              f"({r.checked_coords} coords)")
        failures += 0 if r.ok else 1
    if failures:
        print(f"{failures} op(s) failed the gradient check")
        return EXIT_CHECK
    print(f"all {len(results)} ops match finite differences")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthfusion",
        description="Sparse LiDAR depth completion with RGB guidance and confidence fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("simulate", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--count", type=int, help="number of samples")
    p.add_argument("--seed", type=int, help="corpus seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model on a corpus")
    common(p)
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output directory for checkpoints/logs")
    p.add_argument("--stage", default="end2end", help="end2end|global|local|staged")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--seed", type=int, help="override train.seed and model.seed")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--crop-h", type=int, default=None, help="bottom-crop height")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "all"))
    p.add_argument("--ablate", default="fused", choices=sorted(_ABLATE_STAGE))
    p.add_argument("--out", required=True, help="directory for report.{json,txt}")
    p.add_argument("--crop-h", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("complete", help="complete one sparse depth frame")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True, help="8-bit RGB PNG")
    p.add_argument("--lidar", required=True, help="16-bit sparse depth PNG")
    p.add_argument("--out", required=True, help="output 16-bit depth PNG")
    p.add_argument("--vis", action="store_true", help="also write a color visualization")
    p.add_argument("--truth", help="optional true-depth PNG to report RMSE against")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except kittiio.AlignmentError as e:
        print(f"alignment error: {e}", file=sys.stderr)
        return EXIT_ALIGNMENT
    except (kittiio.FormatError, kittiio.RangeError) as e:
        print(f"file format error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericAbort, NonFinite) as e:
        diag = getattr(e, "diagnostics", None)
        print(f"numeric abort: {e}" + (f" ({diag})" if diag else ""), file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
