"""Command-line surface: train, stylize, video-stylize, eval, gradcheck.

Exit codes: 0 success, 1 gradcheck failure, 2 bad paths or configuration,
3 numeric divergence (the message names the iteration).
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import config as cfgmod
from . import gradcheck as gc
from . import imageio
from . import losses as L
from . import nets
from . import report
from . import training
from .autodiff import Tensor
from .imageops import pad_to_multiple

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


class CliError(Exception):
    """User-facing startup problem; maps to exit code 2."""


def _worker_count() -> int:
    raw = os.environ.get("RLNST_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _load_run_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            cfgmod.apply_file(cfg, path)
        except cfgmod.ConfigError as exc:
            raise CliError(str(exc)) from exc
    overrides = {k: getattr(args, k, None) for k in
                 ("seed", "steps", "iterations", "out_dir", "resolution", "mode",
                  "content_dir", "frames_dir", "style_image", "checkpoint",
                  "eta", "eta_q", "eta_phi", "reward_scale")}
    try:
        cfgmod.apply_overrides(cfg, overrides)
    except cfgmod.ConfigError as exc:
        raise CliError(str(exc)) from exc
    return cfg


def _list_images(directory: Path) -> list:
    exts = {".png", ".ppm", ".pnm"}
    files = sorted(p for p in directory.iterdir()
                   if p.is_file() and p.suffix.lower() in exts)
    if not files:
        raise CliError(f"no images (.png/.ppm) in {directory}")
    return files


def _load_model_from_checkpoint(path: Path) -> nets.Model:
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}")
    try:
        arrays = ckpt.load(path)
    except ckpt.CheckpointError as exc:
        raise CliError(str(exc)) from exc
    video = any(name.startswith("actor.step_gru.") for name in arrays)
    model = nets.build_model(seed=0, video=video)
    try:
        ckpt.bind(model.registry, arrays)
    except ckpt.CheckpointError as exc:
        raise CliError(str(exc)) from exc
    return model


def _stylize_steps(model: nets.Model, image: np.ndarray, steps: int,
                   frame_hidden_by_step=None):
    """Run `steps` mean-action applications; returns per-step images at the
    original size. Threads the step hidden within the call and, when given,
    the per-step frame hiddens across calls (video mode)."""
    padded, h, w = pad_to_multiple(image, 4)
    state = padded.astype(np.float32)
    outs = []
    step_hidden = None
    with ad.no_grad():
        for t in range(steps):
            fh = None
            if frame_hidden_by_step is not None:
                fh = frame_hidden_by_step[t]
            m, _, _, step_hidden, new_fh = model.stylize_step(
                Tensor(state[None]), mean_action=True,
                step_hidden=step_hidden, frame_hidden=fh)
            state = m.data[0].astype(np.float32)
            if frame_hidden_by_step is not None and new_fh is not None:
                frame_hidden_by_step[t] = Tensor(new_fh.data.copy())
            outs.append(state[:, :h, :w].copy())
    return outs


# -- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    src_dir = cfg.frames_dir if cfg.mode == "video" else cfg.content_dir
    if not src_dir:
        raise CliError("content_dir (image mode) or frames_dir (video mode) is required")
    src = Path(src_dir)
    if not src.is_dir():
        raise CliError(f"content directory not found: {src}")
    if not cfg.style_image:
        raise CliError("style_image is required")
    style_path = Path(cfg.style_image)
    if not style_path.is_file():
        raise CliError(f"style image not found: {style_path}")

    files = _list_images(src)
    try:
        contents = [pad_to_multiple(imageio.load_resized(p, cfg.resolution), 4)[0]
                    for p in files]
        style = imageio.load_resized(style_path, cfg.resolution)
    except imageio.ImageFormatError as exc:
        raise CliError(str(exc)) from exc

    model = nets.build_model(seed=cfg.seed, video=(cfg.mode == "video"))
    if cfg.feature_weights:
        fw = Path(cfg.feature_weights)
        if not fw.is_file():
            raise CliError(f"feature weight file not found: {fw}")
        try:
            ckpt.bind(model.registry, ckpt.load(fw), only_prefix="featnet.")
        except ckpt.CheckpointError as exc:
            raise CliError(str(exc)) from exc

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_cfg = cfg.train_config()

    def checkpoint_hook(it, _row):
        if cfg.save_every > 0 and it % cfg.save_every == 0 and it < cfg.iterations:
            ckpt.save(model.registry.state_arrays(), out_dir / f"ckpt_{it:06d}.ckpt")

    result = training.train(train_cfg, model, contents, style,
                            weights=cfg.loss_weights(), on_iteration=checkpoint_hook)
    (out_dir / "metrics.csv").write_text(training.format_csv(result.rows),
                                         encoding="utf-8")
    report.training_curves(result.rows, out_dir / "metrics.png")
    ckpt.save(model.registry.state_arrays(), out_dir / "ckpt_final.ckpt")
    last = result.rows[-1]
    print(f"trained {cfg.iterations} iterations; final L={last['L']:.6g} "
          f"reward={last['reward_mean']:.4g}")
    print(f"wrote {out_dir / 'metrics.csv'}, {out_dir / 'metrics.png'}, "
          f"{out_dir / 'ckpt_final.ckpt'}")
    return EXIT_OK


def cmd_stylize(args) -> int:
    model = _load_model_from_checkpoint(Path(args.ckpt))
    in_path = Path(args.input)
    if not in_path.is_file():
        raise CliError(f"input image not found: {in_path}")
    try:
        image = imageio.decode(in_path)
    except imageio.ImageFormatError as exc:
        raise CliError(str(exc)) from exc
    steps = args.steps
    out_dir = Path(args.out_dir or "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    outs = _stylize_steps(model, image, steps)
    width = max(2, len(str(steps)))
    for t, img in enumerate(outs, start=1):
        imageio.encode(img, out_dir / f"step_{t:0{width}d}.png")
    report.contact_sheet([image] + outs, out_dir / "contact_sheet.png",
                         titles=["input"] + [f"step {t}" for t in range(1, steps + 1)])
    print(f"wrote {steps} step images and contact_sheet.png to {out_dir}")
    return EXIT_OK


def cmd_video_stylize(args) -> int:
    model = _load_model_from_checkpoint(Path(args.ckpt))
    frames_dir = Path(args.frames_dir)
    if not frames_dir.is_dir():
        raise CliError(f"frames directory not found: {frames_dir}")
    files = _list_images(frames_dir)
    try:
        frames = [imageio.decode(p) for p in files]
    except imageio.ImageFormatError as exc:
        raise CliError(str(exc)) from exc
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise CliError(f"frames have mixed sizes: {sorted(shapes)}")
    steps = args.steps
    out_dir = Path(args.out_dir or "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    frame_hidden_by_step = [None] * steps if model.video else None
    width = max(2, len(str(steps)))
    for idx, frame in enumerate(frames, start=1):
        outs = _stylize_steps(model, frame, steps,
                              frame_hidden_by_step=frame_hidden_by_step)
        fdir = out_dir / f"frame_{idx:04d}"
        fdir.mkdir(parents=True, exist_ok=True)
        for t, img in enumerate(outs, start=1):
            imageio.encode(img, fdir / f"step_{t:0{width}d}.png")
    print(f"wrote {len(frames)} frames x {steps} steps to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model_from_checkpoint(Path(args.ckpt))
    content_dir = Path(args.content_dir)
    if not content_dir.is_dir():
        raise CliError(f"content directory not found: {content_dir}")
    style_path = Path(args.style_image)
    if not style_path.is_file():
        raise CliError(f"style image not found: {style_path}")
    files = _list_images(content_dir)
    try:
        images = [imageio.decode(p) for p in files]
        style = imageio.decode(style_path)
    except imageio.ImageFormatError as exc:
        raise CliError(str(exc)) from exc
    steps = args.steps
    target = L.StyleTarget.from_image(style, model.featnet)
    params = model.inference_param_count()

    def eval_one(image):
        t0 = time.perf_counter()
        outs = _stylize_steps(model, image, steps)
        elapsed = (time.perf_counter() - t0) / steps
        rows = []
        with ad.no_grad():
            c_t = Tensor(image[None].astype(np.float32))
            for m in outs:
                m_t = Tensor(m[None].astype(np.float32))
                rows.append((L.content_loss(m_t, c_t, model.featnet).item(),
                             L.style_loss(m_t, target, model.featnet).item()))
        return rows, elapsed

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(eval_one, images))
    else:
        results = [eval_one(im) for im in images]

    mean_content = [float(np.mean([r[0][t][0] for r in results])) for t in range(steps)]
    mean_style = [float(np.mean([r[0][t][1] for r in results])) for t in range(steps)]
    sec_per = float(np.mean([r[1] for r in results]))

    out_dir = Path(args.out_dir or "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["step,content_loss,style_loss,sec_per_image,params"]
    for t in range(steps):
        lines.append(f"{t + 1},{mean_content[t]!r},{mean_style[t]!r},"
                     f"{sec_per!r},{params}")
    (out_dir / "eval.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    report.eval_chart(list(range(1, steps + 1)), mean_content, mean_style,
                      out_dir / "eval.png")
    print(f"actor+stylizer parameters: {params}")
    print(f"{'step':>4} {'content':>12} {'style':>14} {'sec/image':>10}")
    for t in range(steps):
        print(f"{t + 1:>4} {mean_content[t]:>12.5f} {mean_style[t]:>14.6e} "
              f"{sec_per:>10.3f}")
    print(f"wrote {out_dir / 'eval.csv'} and {out_dir / 'eval.png'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gc.run_suite(seed=args.seed or 0, inject_fault=args.inject_fault)
    print(gc.format_report(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"FAILED checks: {', '.join(r.name for r in failed)}")
        return EXIT_CHECK_FAILED
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlnst",
        description="Step-wise neural style transfer with an actor-critic over spatial latent actions")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from content + style images")
    p_train.add_argument("--config", help="key=value config file")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--iterations", type=int)
    p_train.add_argument("--steps", type=int, help="episode length T")
    p_train.add_argument("--resolution", type=int)
    p_train.add_argument("--mode", choices=["image", "video"])
    p_train.add_argument("--content-dir", dest="content_dir")
    p_train.add_argument("--frames-dir", dest="frames_dir")
    p_train.add_argument("--style-image", dest="style_image")
    p_train.add_argument("--out", dest="out_dir")
    p_train.add_argument("--eta", type=float)
    p_train.add_argument("--eta-q", dest="eta_q", type=float)
    p_train.add_argument("--eta-phi", dest="eta_phi", type=float)
    p_train.add_argument("--reward-scale", dest="reward_scale", type=float)
    p_train.set_defaults(func=cmd_train)

    p_sty = sub.add_parser("stylize", help="emit per-step stylizations of one image")
    p_sty.add_argument("--ckpt", required=True)
    p_sty.add_argument("--input", required=True)
    p_sty.add_argument("--steps", type=int, default=10)
    p_sty.add_argument("--seed", type=int, default=0)
    p_sty.add_argument("--out", dest="out_dir")
    p_sty.set_defaults(func=cmd_stylize)

    p_vid = sub.add_parser("video-stylize", help="stylize an ordered frame directory")
    p_vid.add_argument("--ckpt", required=True)
    p_vid.add_argument("--frames", dest="frames_dir", required=True)
    p_vid.add_argument("--steps", type=int, default=10)
    p_vid.add_argument("--seed", type=int, default=0)
    p_vid.add_argument("--out", dest="out_dir")
    p_vid.set_defaults(func=cmd_video_stylize)

    p_eval = sub.add_parser("eval", help="per-step losses and timings over a content set")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--content", dest="content_dir", required=True)
    p_eval.add_argument("--style-image", dest="style_image", required=True)
    p_eval.add_argument("--steps", type=int, default=10)
    p_eval.add_argument("--out", dest="out_dir")
    p_eval.set_defaults(func=cmd_eval)

    p_gc = sub.add_parser("gradcheck", help="run the finite-difference oracle suite")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--inject-fault", action="store_true",
                      help=argparse.SUPPRESS)
    p_gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except training.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
