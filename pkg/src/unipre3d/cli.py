"""Command-line entry points.

    unipre3d synth     --config cfg.toml [--seed N] [--force]
    unipre3d pretrain  --config cfg.toml [--seed N] [--max-steps N]
    unipre3d render    --checkpoint stem --sample dir --view K [--out img.ppm]
    unipre3d gradcheck [--seed N] [--n-seeds N] [--json]
    unipre3d eval      --checkpoint stem --dataset root [--json]
    unipre3d probe     --checkpoint stem --dataset root [--seed N]
    unipre3d config    --print-defaults [--mode object|scene]

Exit codes: 0 success, 2 configuration/usage error, 3 numeric failure
(non-finite loss or a failed gradient check), 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, default_config, load_config, serialize
from .data import generate_object_sample, generate_scene_sample, load_sample, save_sample
from .errors import ConfigError, DatasetIOError, NumericError, SelectionError
from .gradcheck import run_gradcheck
from .imgio import write_png, write_ppm
from .pipeline import PretrainModel, eval_model, load_model, probe, train
from .renderer import render

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _generate(cfg: RunConfig, seed: int):
    d = cfg.data
    if cfg.mode == "object":
        return generate_object_sample(seed, n_points=d.n_points, n_cameras=d.n_cameras,
                                      image_size=d.image_size, n_gaussians=d.n_gaussians,
                                      background=tuple(cfg.loss.background))
    return generate_scene_sample(seed, n_points=d.n_points, n_cameras=d.n_cameras,
                                 image_size=d.image_size, n_gaussians=d.n_gaussians,
                                 background=tuple(cfg.loss.background))


def _load_dataset(root: str | Path) -> list:
    root = Path(root)
    manifest = root / "manifest.json"
    if not manifest.is_file():
        raise DatasetIOError(f"no dataset manifest at {manifest}")
    meta = json.loads(manifest.read_text())
    return [load_sample(root / f"sample_{i:04d}") for i in range(meta["n_samples"])]


def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    root = Path(cfg.data.root)
    if root.exists() and any(root.iterdir()):
        if not args.force:
            print(f"refusing to overwrite non-empty {root}; pass --force", file=sys.stderr)
            return EXIT_IO
    root.mkdir(parents=True, exist_ok=True)
    seeds = [cfg.seed + i for i in range(cfg.data.n_samples)]
    for i, seed in enumerate(seeds):
        save_sample(root / f"sample_{i:04d}", _generate(cfg, seed))
    (root / "manifest.json").write_text(json.dumps(
        {"mode": cfg.mode, "n_samples": cfg.data.n_samples, "seeds": seeds,
         "image_size": cfg.data.image_size, "n_cameras": cfg.data.n_cameras}, indent=1))
    print(f"wrote {cfg.data.n_samples} {cfg.mode} samples to {root}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    samples = _load_dataset(cfg.data.root)
    result = train(cfg, samples, cfg.out_dir, max_steps=args.max_steps)
    print(json.dumps(result, indent=1))
    return EXIT_OK


def cmd_render(args) -> int:
    model, _ = load_model(args.checkpoint)
    sample = load_sample(args.sample)
    view = args.view
    if not 0 <= view < sample.n_cameras:
        raise ConfigError(f"--view {view} out of range [0, {sample.n_cameras})")
    reference = np.array([view]) if model.cfg.mode == "object" else \
        np.linspace(0, sample.n_cameras - 1, model.cfg.views.v_ref).astype(np.int64)
    g = model.predict_gaussians(sample, reference)
    out = render(g, sample.cameras[view], tuple(model.cfg.loss.background))
    path = Path(args.out)
    if path.suffix == ".png":
        write_png(path, out.image)
    else:
        write_ppm(path, out.image)
    print(f"rendered view {view} ({len(g)} splats) -> {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report, ok = run_gradcheck(seeds=range(args.seed, args.seed + args.n_seeds))
    if args.json:
        print(json.dumps(report, indent=1))
    else:
        print("renderer worst ratio per block (<= 1.0 passes):")
        for name, ratio in report["renderer_worst_ratio"].items():
            print(f"  {name:10s} {ratio:.3e}")
        print(f"decode worst ratio: {report['decode_worst_ratio']:.3e}")
        for name, ratio in report["tape_worst_ratio"].items():
            print(f"tape {name}: {ratio:.3e}")
        print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_eval(args) -> int:
    model, _ = load_model(args.checkpoint)
    samples = _load_dataset(args.dataset)
    report = eval_model(model, samples, seed=args.seed or 0)
    if args.json:
        print(json.dumps(report, indent=1))
    else:
        for row in report["per_sample"]:
            print(f"sample seed {row['sample_seed']:6d}  psnr {row['psnr']:7.2f} dB")
        print(f"mean psnr {report['mean_psnr']:.2f} dB "
              f"(identical-image sanity: {report['sanity_identical_db']:.0f} dB)")
    return EXIT_OK


def cmd_probe(args) -> int:
    model, _ = load_model(args.checkpoint)
    samples = _load_dataset(args.dataset)
    report = probe(model, samples, seed=args.seed or 0)
    print(json.dumps({k: v for k, v in report.items() if k != "per_sample"}, indent=1))
    return EXIT_OK


def cmd_config(args) -> int:
    if not args.print_defaults:
        raise ConfigError("config subcommand only supports --print-defaults")
    sys.stdout.write(serialize(default_config(args.mode)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unipre3d",
                                description="desk-scale point-cloud pre-training "
                                            "via differentiable Gaussian splatting")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("pretrain", help="run the pre-training loop")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--max-steps", type=int, default=None)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("render", help="render one view from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sample", required=True)
    sp.add_argument("--view", type=int, required=True)
    sp.add_argument("--out", default="render.ppm")
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("gradcheck", help="finite-difference verification suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-seeds", type=int, default=3)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("eval", help="held-out PSNR table")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("probe", help="per-point transfer probe, pretrained vs random")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_probe)

    sp = sub.add_parser("config", help="print the built-in defaults as TOML")
    sp.add_argument("--print-defaults", action="store_true")
    sp.add_argument("--mode", default="object", choices=("object", "scene"))
    sp.set_defaults(fn=cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, SelectionError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetIOError, OSError) as e:
        print(f"I/O failure: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
