"""Command-line entry point.

Exit codes: 0 success, 2 usage errors (argparse), 1 runtime failures.
Flags mirror the training configuration fields one-to-one, so a metrics CSV
plus the flag set reproduces a run exactly.  ``SOGS_THREADS`` caps worker
threads (0 = auto); ``SOGS_DETERMINISTIC=1`` forces sequential reductions
and zeroes the wall-clock column.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .anchors import basis_rows, refresh_basis
from .errors import SogsError
from .losses import sobel_gradients
from .sceneio import (
    generate_synthetic_scene,
    load_checkpoint,
    load_scene,
    read_image,
    save_checkpoint,
    save_scene,
    spec_from_text,
    write_image,
)
from .training import (
    TrainConfig,
    evaluate,
    metrics_to_csv,
    render_view,
    state_from_checkpoint,
    train,
)


def _load_scene_arg(path_str: str):
    path = Path(path_str)
    if path.is_dir():
        return load_scene(path)
    return generate_synthetic_scene(spec_from_text(path.read_text()))


def _cmd_gen_scene(args) -> int:
    spec = spec_from_text(Path(args.spec).read_text())
    scene = generate_synthetic_scene(spec)
    save_scene(scene, args.out)
    print(f"wrote scene with {len(scene.cameras)} views to {args.out}")
    return 0


def _cmd_train(args) -> int:
    scene = _load_scene_arg(args.scene)
    config = TrainConfig(
        feature_dim=args.dim, m=args.m, k=args.k, iterations=args.iters,
        seed=args.seed, use_soa=not args.no_soa, use_sgl=not args.no_sgl,
        sgl_variant=args.sgl_variant, basis_refresh_every=args.basis_refresh_every,
        eval_every=args.eval_every, views_per_iteration=args.views_per_iter,
    )
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(scene, config, resume_from=resume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.sogs", result.checkpoint)
    (out / "metrics.csv").write_text(metrics_to_csv(result.metrics))
    last = result.metrics[-1]
    print(f"trained {config.iterations} iterations; "
          f"test PSNR {last.test_psnr:.3f} dB, test SSIM {last.test_ssim:.4f}")
    return 0


def _cmd_render(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    config = TrainConfig.from_dict(ckpt.config["train"])
    cams = ckpt.config["scene"]["cameras"]
    if not 0 <= args.view < len(cams):
        raise SogsError(f"view {args.view} out of range (checkpoint has {len(cams)})")
    from .renderer import Camera
    c = cams[args.view]
    camera = Camera(width=c["width"], height=c["height"], fx=c["fx"], fy=c["fy"],
                    cx=c["cx"], cy=c["cy"],
                    rotation=np.array(c["rotation"]).reshape(3, 3),
                    translation=np.array(c["translation"]))
    state = state_from_checkpoint(ckpt, config)
    if config.use_soa and state.basis is None:
        state.basis = refresh_basis(state.field, config.m, iteration=state.iteration)
    background = np.array(ckpt.config["scene"]["background"])
    write_image(args.out, render_view(state, camera, background, config))
    print(f"rendered view {args.view} to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    scene = _load_scene_arg(args.scene)
    views = [(cam, img) for cam, img in zip(scene.cameras, scene.images)]
    rows = evaluate(ckpt, views)
    lines = ["view,psnr,ssim"]
    lines.extend(f"{r.view},{r.psnr!r},{r.ssim!r}" for r in rows)
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"mean PSNR {rows[-1].psnr:.3f} dB over {len(rows) - 1} views")
    return 0


def _cmd_gradmap(args) -> int:
    image = read_image(args.image)
    maps = sobel_gradients(image)
    # Sobel outputs for [0, 1] inputs live in [-4, 4]; fixed scaling keeps
    # constant images black instead of amplifying noise adaptively.
    for name, grad in (("gx", maps.gx), ("gy", maps.gy)):
        magnitude = np.mean(np.abs(grad), axis=2) / 4.0
        write_image(f"{args.out_prefix}_{name}.ppm",
                    np.repeat(magnitude[:, :, None], 3, axis=2))
    print(f"wrote {args.out_prefix}_gx.ppm and {args.out_prefix}_gy.ppm")
    return 0


def _cmd_stats(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    m = ckpt.config["train"]["m"]
    basis = refresh_basis(ckpt.field, m, iteration=ckpt.iteration)
    lines = ["iteration,quantity,index,value"]
    lines.extend(f"{it},{q},{i},{v!r}" for it, q, i, v in basis_rows(basis))
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote basis statistics for {len(ckpt.field)} anchors to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sogs",
        description="Anchor-based Gaussian splatting with second-order "
                    "feature augmentation and a selective gradient loss.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene directory")
    p.add_argument("--spec", required=True, help="key=value scene spec file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_gen_scene)

    p = sub.add_parser("train", help="fit a model to a scene")
    p.add_argument("--scene", required=True,
                   help="scene directory from gen-scene, or a spec file to generate in memory")
    p.add_argument("--out", required=True, help="output directory for checkpoint and metrics")
    p.add_argument("--dim", type=int, default=16, help="anchor feature dimension")
    p.add_argument("--m", type=int, default=2, help="texture vectors per anchor")
    p.add_argument("--k", type=int, default=10, help="Gaussians per anchor")
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-soa", action="store_true", help="disable feature augmentation")
    p.add_argument("--no-sgl", action="store_true", help="disable the gradient-discrepancy loss")
    p.add_argument("--sgl-variant", choices=("per_pixel", "scalar"), default="per_pixel")
    p.add_argument("--basis-refresh-every", type=int, default=1)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--views-per-iter", type=int, default=1, help="0 = all train views")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", help="render one checkpoint view")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--out", required=True, help="output PPM path")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint against scene ground truth")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradmap", help="write Sobel gradient magnitude images")
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=_cmd_gradmap)

    p = sub.add_parser("stats", help="dump the second-order basis of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SogsError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
