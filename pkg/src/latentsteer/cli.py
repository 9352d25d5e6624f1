"""Command line interface: generate, edit, selfmask, serve.

A CLI run writes the same directory layout as a service job —
``config.json``, ``frames/%06d.png``, ``final.png``, ``events.jsonl``,
``checkpoint.bin`` — plus the derived ``losses.csv`` and
``loss_curve.png``, and for identical configs and seeds the run
artifacts are byte-identical to the service's.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .augment import STAGE_NAMES
from .backend import attach
from .errors import LatentSteerError
from .pipeline import (Run, RunConfig, image_to_png_bytes,
                       png_bytes_to_image, validate_config)
from .report import append_event, write_run_report
from .selfmask import EditSpec, pixel_mask_to_latent, selfmask_for_image

CHECKPOINT_EVERY = 25


def parse_prompt(raw: str) -> dict:
    """``TEXT`` or ``TEXT:WEIGHT``; a trailing ``:number`` is the weight."""
    text, sep, tail = raw.rpartition(":")
    if sep:
        try:
            return {"text": text, "weight": float(tail)}
        except ValueError:
            pass  # the colon is part of the prompt itself
    return {"text": raw, "weight": 1.0}


def parse_size(raw: str) -> list[int]:
    parts = raw.lower().split("x")
    if len(parts) != 2:
        raise ValueError(f"size must be WIDTHxHEIGHT, got '{raw}'")
    width, height = (int(p) for p in parts)
    return [height, width]


def parse_listen(raw: str) -> tuple[str, int]:
    host, sep, port = raw.rpartition(":")
    if not sep:
        raise ValueError(f"listen address must be HOST:PORT, got '{raw}'")
    return host or "127.0.0.1", int(port)


def load_image(path: str) -> np.ndarray:
    return png_bytes_to_image(Path(path).read_bytes())


def _add_run_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--prompt", action="append", required=True,
                     metavar="TEXT[:WEIGHT]",
                     help="guidance prompt; repeat to steer toward several "
                          "targets, negative weights steer away")
    sub.add_argument("--iterations", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--size", metavar="WxH")
    sub.add_argument("--backend", default=None,
                     help="toy | socket:<path> (default: BACKEND env or toy)")
    sub.add_argument("--out", required=True, metavar="DIR")
    sub.add_argument("--save-every", type=int, dest="save_every")
    sub.add_argument("--no-quantize", action="store_true")
    sub.add_argument("--alpha0", type=float)
    sub.add_argument("--alpha-decay", type=float, dest="alpha_decay")
    sub.add_argument("--decay-kind", dest="decay_kind",
                     choices=("multiplicative", "linear"))
    sub.add_argument("--cuts", type=int,
                     help="augmented views per iteration")
    sub.add_argument("--disable-aug", action="append", dest="disable_aug",
                     choices=STAGE_NAMES, metavar="STAGE",
                     help=f"turn off one augmentation stage "
                          f"({', '.join(STAGE_NAMES)}); repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentsteer",
        description="Steer a vector-quantized latent image toward text "
                    "prompts by gradient descent.")
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("generate", help="synthesize from noise")
    _add_run_flags(gen)
    gen.set_defaults(func=cmd_generate)

    edit = subs.add_parser("edit", help="rework an existing image")
    _add_run_flags(edit)
    edit.add_argument("--init-image", required=True, dest="init_image",
                      metavar="PATH")
    edit.add_argument("--mask", metavar="PATH",
                      help="pixel mask PNG; white marks the editable region")
    edit.add_argument("--self-mask", dest="self_mask", metavar="PHRASE",
                      help="derive the editable region from a phrase")
    edit.add_argument("--struct-weight", type=float, dest="struct_weight",
                      default=0.5,
                      help="weight pulling crops toward the source image")
    edit.add_argument("--k-sigma", type=float, dest="k_sigma",
                      help="self-mask threshold offset in std deviations")
    edit.set_defaults(func=cmd_edit)

    mask = subs.add_parser("selfmask",
                           help="write the zero-shot mask for a phrase")
    mask.add_argument("--image", required=True, metavar="PATH")
    mask.add_argument("--phrase", required=True)
    mask.add_argument("--k-sigma", type=float, dest="k_sigma", default=-2.0)
    mask.add_argument("--out", required=True, metavar="MASK.PNG")
    mask.add_argument("--backend", default=None)
    mask.set_defaults(func=cmd_selfmask)

    serve = subs.add_parser("serve", help="run the HTTP job service")
    serve.add_argument("--listen", default=None, metavar="HOST:PORT")
    serve.add_argument("--data-dir", dest="data_dir", default=None)
    serve.add_argument("--backend", default=None)
    serve.add_argument("--max-jobs", type=int, dest="max_jobs", default=None)
    serve.set_defaults(func=cmd_serve)

    return parser


# ---------------------------------------------------------------------------
# shared run plumbing

def _config_doc(args: argparse.Namespace, mode: str) -> dict:
    doc: dict = {"prompts": [parse_prompt(p) for p in args.prompt],
                 "mode": mode}
    if args.iterations is not None:
        doc["iterations"] = args.iterations
    if args.lr is not None:
        doc["lr"] = args.lr
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.size is not None:
        doc["size"] = parse_size(args.size)
    doc["backend"] = args.backend or os.environ.get("BACKEND", "toy")
    if args.save_every is not None:
        doc["save_every"] = args.save_every
    if args.no_quantize:
        doc["quantize"] = False
    if args.alpha0 is not None:
        doc["alpha0"] = args.alpha0
    if args.alpha_decay is not None:
        doc["alpha_decay"] = args.alpha_decay
    if args.decay_kind is not None:
        doc["decay_kind"] = args.decay_kind
    aug: dict = {}
    if args.cuts is not None:
        aug["cuts"] = args.cuts
    for stage in args.disable_aug or ():
        aug[stage] = False
    if aug:
        doc["aug"] = aug
    return doc


def _validated(parser: argparse.ArgumentParser, doc: dict) -> RunConfig:
    config, problems = validate_config(doc)
    if problems:
        parser.error("; ".join(f"{f}: {m}" for f, m in problems))
    return config


def execute_run(config: RunConfig, out_dir: Path,
                init_image: np.ndarray | None = None,
                latent_mask: np.ndarray | None = None,
                echo=print) -> int:
    """Drive one run to completion, writing the standard job layout."""
    out_dir.mkdir(parents=True, exist_ok=True)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(exist_ok=True)
    (out_dir / "config.json").write_bytes(
        json.dumps(config.to_dict(), indent=1).encode())
    events = out_dir / "events.jsonl"
    if events.exists():
        events.unlink()  # a rerun into the same directory starts clean
    append_event(events, "state", {"state": "queued"})
    append_event(events, "state", {"state": "running"})

    backend = attach(config.backend, config.size)
    run = Run(config, backend=backend, init_image=init_image,
              latent_mask=latent_mask)
    (out_dir / "checkpoint.bin").write_bytes(run.checkpoint_bytes())

    def save_frame(iteration: int, image: np.ndarray) -> None:
        (frames_dir / f"{iteration:06d}.png").write_bytes(
            image_to_png_bytes(image))
        append_event(events, "frame", {
            "iteration": iteration,
            "url": f"frames/{iteration:06d}.png",
        })

    while not run.finished():
        report = run.step()
        append_event(events, "loss", {
            "iteration": report.iteration,
            "l_clip": report.l_clip,
            "l_reg": report.l_reg,
            "total": report.total,
        })
        if run.iteration % config.save_every == 0:
            save_frame(run.iteration, run.frame_image())
        if run.iteration % CHECKPOINT_EVERY == 0:
            (out_dir / "checkpoint.bin").write_bytes(run.checkpoint_bytes())

    final = run.frame_image()
    if run.iteration % config.save_every != 0:
        save_frame(run.iteration, final)
    (out_dir / "final.png").write_bytes(image_to_png_bytes(final))
    (out_dir / "checkpoint.bin").write_bytes(run.checkpoint_bytes())
    append_event(events, "state", {"state": "completed"})
    write_run_report(out_dir)
    echo(f"completed {run.iteration} iterations -> {out_dir / 'final.png'}")
    return 0


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args, parser) -> int:
    config = _validated(parser, _config_doc(args, "generate"))
    return execute_run(config, Path(args.out))


def cmd_edit(args, parser) -> int:
    if args.mask and args.self_mask:
        parser.error("--mask and --self-mask are mutually exclusive")
    doc = _config_doc(args, "masked_edit" if args.self_mask else "edit")
    doc["struct_weight"] = args.struct_weight
    if args.self_mask:
        doc["self_mask_phrase"] = args.self_mask
        if args.k_sigma is not None:
            doc["k_sigma"] = args.k_sigma
    config = _validated(parser, doc)

    init_image = load_image(args.init_image)
    latent_mask = None
    if args.mask:
        backend = attach(config.backend, config.size)
        info = backend.info()
        pixel = load_image(args.mask).mean(axis=2)
        latent_mask = pixel_mask_to_latent(
            (pixel >= 0.5).astype(np.float64),
            (info.latent_h, info.latent_w))
    return execute_run(config, Path(args.out), init_image=init_image,
                       latent_mask=latent_mask)


def cmd_selfmask(args, parser) -> int:
    image = load_image(args.image)
    backend = attach(args.backend or os.environ.get("BACKEND", "toy"),
                     image.shape[:2])
    info = backend.info()
    spec = EditSpec(phrase=args.phrase, k_sigma=args.k_sigma)
    _, pixel_mask, _ = selfmask_for_image(
        backend, image, spec, (info.latent_h, info.latent_w))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(image_to_png_bytes(
        np.repeat(pixel_mask[:, :, None], 3, axis=2)))
    covered = 100.0 * pixel_mask.mean()
    print(f"mask covers {covered:.1f}% of the image -> {out}")
    return 0


def cmd_serve(args, parser) -> int:
    import uvicorn

    from .service import create_app

    listen = args.listen or os.environ.get("LISTEN_ADDR", "127.0.0.1:8000")
    host, port = parse_listen(listen)
    app = create_app(data_dir=args.data_dir, backend=args.backend,
                     max_jobs=args.max_jobs)
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    except OSError as exc:
        print(f"error: cannot listen on {listen}: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except ValueError as exc:
        parser.error(str(exc))
    except (LatentSteerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
