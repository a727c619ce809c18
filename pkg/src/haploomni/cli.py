"""``haploomni`` command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 argument error, 3 config
error, 4 sequencing error, 5 divergence, 6 format/I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import CheckpointFormatError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import generate_synthetic
from .diffusion import NoiseSchedule, sample
from .language import VOCAB, decode
from .masking import TokenTypeSequence, build_mask
from .model import ModelBundle, image_to_latent, latent_to_image, patchify, unpatchify
from .numeric import seed_everything
from .training import STAGES, PREREQUISITES, DivergenceError, SequencingError, TeacherBundle, run_stage

EXIT_OK, EXIT_VERIFY, EXIT_ARG, EXIT_CONFIG, EXIT_SEQ, EXIT_DIVERGE, EXIT_IO = 0, 1, 2, 3, 4, 5, 6

log = logging.getLogger("haploomni")


class ArgumentError(ValueError):
    pass


def _seed(cfg: RunConfig) -> int:
    env = os.environ.get("HAPLO_SEED")
    if env is None:
        return cfg.seed
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"HAPLO_SEED must be an integer, got {env!r}") from None


def _schedule(bundle: ModelBundle) -> NoiseSchedule:
    meta = getattr(bundle, "extra_meta", {}).get("schedule")
    return NoiseSchedule(**meta) if meta else NoiseSchedule()


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    seed = _seed(cfg)
    seed_everything(seed)
    out = Path(args.out or cfg.out_dir)
    stage = args.stage
    missing = [f"{out / s}.ckpt" for s in PREREQUISITES[stage] if not (out / f"{s}.ckpt").exists()]
    if missing:
        raise SequencingError(f"stage {stage} needs checkpoints that do not exist: {', '.join(missing)}")
    source = args.resume
    if source is None:
        idx = STAGES.index(stage)
        if idx > 0 and (out / f"{STAGES[idx - 1]}.ckpt").exists():
            source = out / f"{STAGES[idx - 1]}.ckpt"
    if source is not None:
        bundle = load_checkpoint(source)
    else:
        bundle = ModelBundle(cfg.model, seed=seed)
    if cfg.precision == 64:
        bundle = bundle.double()
    data = generate_synthetic(cfg.data_seed, cfg.n_und, cfg.n_gen, cfg.model)
    teachers = TeacherBundle.build(cfg.model, cfg.teacher_seed)
    result = run_stage(cfg.plan(stage), bundle, data, teachers, seed=seed, sched=cfg.schedule, out_dir=out)
    first, last = result.metrics[0]["loss_total"], result.metrics[-1]["loss_total"]
    print(f"{stage}: {len(result.metrics)} steps, loss {first:.5f} -> {last:.5f}")
    print(f"wrote {result.checkpoint} and {result.csv_path}")
    return EXIT_OK


def write_ppm(path: Path, frame: np.ndarray) -> None:
    Image.fromarray(frame, mode="RGB").save(path, format="PPM")


def _slug(text: str) -> str:
    return re.sub(r"[^a-zA-Z0-9]+", "_", text).strip("_") or "sample"


def cmd_sample(args) -> int:
    if args.steps < 1:
        raise ArgumentError(f"--steps must be >= 1, got {args.steps}")
    bundle = load_checkpoint(args.ckpt)
    if args.routing:
        bundle.set_routing(args.routing)
    cfg = bundle.config
    sched = _schedule(bundle)
    if args.steps > sched.T:
        raise ArgumentError(f"--steps must be <= {sched.T}")
    torch.manual_seed(args.seed)
    x = sample(bundle, args.prompt, args.steps, torch.Generator().manual_seed(args.seed), sched)
    frames = latent_to_image(unpatchify(x[0], cfg.patch_size, cfg.frames, cfg.channels, cfg.image_size))
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "samples" / f"{_slug(args.prompt)}_s{args.seed}.ppm"
    out.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    if len(frames) == 1:
        write_ppm(out, frames[0])
        paths.append(out)
    else:
        for i, fr in enumerate(frames):
            p = out.with_name(f"{out.stem}_f{i}{out.suffix}")
            write_ppm(p, fr)
            paths.append(p)
    side = out.with_suffix(out.suffix + ".json")
    side.write_text(json.dumps({"prompt": args.prompt, "steps": args.steps, "seed": args.seed,
                                "frames": [p.name for p in paths]}, sort_keys=True) + "\n")
    for p in paths:
        print(p)
    return EXIT_OK


def read_image(path, size: int) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except OSError as e:
        raise CheckpointFormatError(f"cannot read image {path}: {e}") from None
    arr = np.asarray(img.convert("RGB"))
    if arr.shape[:2] != (size, size):
        raise ArgumentError(f"image is {arr.shape[1]}x{arr.shape[0]}, expected {size}x{size}")
    return arr


def cmd_decode(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    if args.routing:
        bundle.set_routing(args.routing)
    cfg = bundle.config
    arr = read_image(args.image, cfg.image_size)
    frames = np.repeat(arr[None], cfg.frames, axis=0)
    vis = patchify(image_to_latent(frames), cfg.patch_size)
    ids = decode(bundle, vis, args.prompt.encode("utf-8"), max_new=args.max_new, temperature=args.temperature,
                 top_p=args.top_p, rng=torch.Generator().manual_seed(args.seed))
    print(VOCAB.decode(ids))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    checks = run_suite(args.suite)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_VERIFY


def cmd_inspect_mask(args) -> int:
    try:
        seq = TokenTypeSequence.of(args.types)
    except ValueError as e:
        raise ArgumentError(str(e)) from None
    print(build_mask(seq).render())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="haploomni", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=STAGES)
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--resume", help="checkpoint to start from")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate an image from a text prompt")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--routing", choices=("soft", "hard"))
    s.set_defaults(fn=cmd_sample)

    d = sub.add_parser("decode", help="caption an image")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--prompt", default="")
    d.add_argument("--temperature", type=float, default=0.0)
    d.add_argument("--top-p", type=float, default=1.0)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--max-new", type=int, default=32)
    d.add_argument("--routing", choices=("soft", "hard"))
    d.set_defaults(fn=cmd_decode)

    v = sub.add_parser("verify", help="run invariant suites")
    v.add_argument("--suite", default="all", choices=("masks", "gradients", "adaln", "diffusion", "cache", "all"))
    v.set_defaults(fn=cmd_verify)

    m = sub.add_parser("inspect-mask", help="print the attention mask for a type string")
    m.add_argument("--types", required=True, help="string over T, V, S, N")
    m.set_defaults(fn=cmd_inspect_mask)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ArgumentError as e:
        print(f"argument error: {e}", file=sys.stderr)
        return EXIT_ARG
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SequencingError as e:
        print(f"sequencing error: {e}", file=sys.stderr)
        return EXIT_SEQ
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGE
    except (CheckpointFormatError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"argument error: {e}", file=sys.stderr)
        return EXIT_ARG


if __name__ == "__main__":
    sys.exit(main())
