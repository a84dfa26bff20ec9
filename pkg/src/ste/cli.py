"""Command line interface: synth, train, eval, mser, policy-stats.

Every subcommand validates all inputs before producing any output. Exit
codes: 0 success, 2 validation error, 3 numeric/runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import style as st
from .dataio import load_config, parse_manifest, write_sample, load_checkpoint
from .errors import (CheckpointFormatError, ConfigError, InvalidArgumentError,
                     ManifestError, SteError)
from .fonts import discover_fonts
from .image import read_png, write_mask_png
from .metrics import evaluate_pairs_dir, write_report
from .mser import MserParams, extract_text_mask
from .policy import PolicyNet
from .synth import Synthesizer
from .trainer import Trainer, load_records

VALIDATION_ERRORS = (ConfigError, ManifestError, InvalidArgumentError,
                     CheckpointFormatError)


def _build_parser():
    p = argparse.ArgumentParser(prog="ste", description="self-supervised text erasing toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="synthesize training pairs from a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    style_src = sp.add_mutually_exclusive_group()
    style_src.add_argument("--uniform", action="store_true", help="uniform style sampling (default)")
    style_src.add_argument("--policy", metavar="CKPT", help="sample styles from a trained policy")
    sp.add_argument("--config", default=None)

    tp = sub.add_parser("train", help="run the alternating training loop")
    tp.add_argument("--manifest", required=True)
    tp.add_argument("--config", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--resume", default=None)

    ep = sub.add_parser("eval", help="PSNR/SSIM over a directory of (pred, gt) pairs")
    ep.add_argument("--pairs", required=True)
    ep.add_argument("--out", required=True)

    mp = sub.add_parser("mser", help="extract a text-stroke mask from a bbox")
    mp.add_argument("--image", required=True)
    mp.add_argument("--bbox", required=True, help="x0,y0,x1,y1")
    mp.add_argument("--out", required=True)

    pp = sub.add_parser("policy-stats", help="per-element choice frequencies of a policy")
    pp.add_argument("--ckpt", required=True)
    pp.add_argument("--manifest", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--n", type=int, default=2000)
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--config", default=None)
    return p


def _resolve_config(path, seed=None):
    overrides = {} if seed is None else {"seed": seed}
    cfg = load_config(path, overrides)
    print(f"config-fingerprint: {cfg.fingerprint()} seed: {cfg.seed}")
    return cfg


def _build_space(cfg):
    fonts = discover_fonts(cfg.font_dir or None)
    space = st.default_space(fonts)
    if cfg.style_sizes:
        space = st.replace_element_choices(
            space, "size", tuple(int(v) for v in cfg.style_sizes.split(",")))
    return space


def _load_policy(ckpt_path, space):
    loaded = load_checkpoint(ckpt_path)
    policy = PolicyNet(space)
    for name, t in policy.params.params.items():
        key = f"policy/{name}"
        if key not in loaded.params:
            raise CheckpointFormatError(f"checkpoint has no policy parameters ({key} missing)")
        if loaded.params[key].data.shape != t.data.shape:
            raise CheckpointFormatError(f"policy parameter {name} has mismatched shape")
        t.data[...] = loaded.params[key].data
    return policy


def _cmd_synth(args):
    cfg = _resolve_config(args.config, args.seed)
    records = parse_manifest(args.manifest)
    if not records:
        raise ManifestError(f"manifest {args.manifest} has no records")
    space = _build_space(cfg)
    policy = _load_policy(args.policy, space) if args.policy else None
    loaded = load_records(records, cfg.image_size)
    synth = Synthesizer(space=space,
                        mser_params=MserParams(delta=cfg.mser_delta,
                                               min_area=cfg.mser_min_area,
                                               max_variation=cfg.mser_max_variation))
    os.makedirs(args.out, exist_ok=True)
    written = 0
    for i in range(args.n):
        rec = loaded[i % len(loaded)]
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1, i)))
        wrote = False
        for _ in range(10):
            if policy is not None:
                sv, _ = policy.sample_style(rec.state, rng)
            else:
                sv = st.sample_uniform(space, rng)
            try:
                sample = synth.synthesize(rec.image, rec.annotations, rec.blanks, sv)
            except SteError:
                continue
            write_sample(sample, args.out, f"{i:06d}", space)
            wrote = True
            written += 1
            break
        if not wrote:
            print(f"warning: sample {i} skipped (no feasible style)", file=sys.stderr)
    if written == 0:
        raise InvalidArgumentError("no samples could be synthesized from this manifest")
    print(f"wrote {written} samples to {args.out}")
    return 0


def _cmd_train(args):
    cfg = _resolve_config(args.config)
    records = parse_manifest(args.manifest)
    trainer = Trainer(records, cfg, out_dir=args.out)
    if args.resume:
        trainer.load(args.resume)
        print(f"resumed from {args.resume} at step {trainer.step}")
    trainer.run(progress=_progress(cfg))
    for line in trainer.diagnostics:
        print(f"note: {line}", file=sys.stderr)
    print(f"finished {trainer.step} steps; outputs in {args.out}")
    return 0


def _progress(cfg):
    every = max(cfg.total_steps // 20, 1)

    def cb(step, row):
        if step % every == 0 or step == cfg.total_steps:
            print(f"step {step}/{cfg.total_steps} total={row['total']:.4f} "
                  f"rec={row['l_rec']:.4f} te={row['l_te']:.4f}")

    return cb


def _cmd_eval(args):
    rows, summary = evaluate_pairs_dir(args.pairs)
    write_report(rows, summary, args.out)
    print(f"mean PSNR {summary['mean_psnr']:.3f} dB, mean SSIM {summary['mean_ssim']:.4f} "
          f"over {summary['count']} pairs (FID: {summary['fid']})")
    return 0


def _cmd_mser(args):
    try:
        bbox = tuple(int(v) for v in args.bbox.split(","))
    except ValueError as err:
        raise InvalidArgumentError(f"--bbox must be x0,y0,x1,y1 integers: {err}") from err
    if len(bbox) != 4:
        raise InvalidArgumentError("--bbox must have exactly four integers")
    img = read_png(args.image)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    mask, failed = extract_text_mask(img, bbox)
    write_mask_png(args.out, mask)
    status = "extraction failed (empty mask)" if failed else f"{int(mask.sum())} stroke pixels"
    print(f"wrote {args.out}: {status}")
    return 0


def _cmd_policy_stats(args):
    cfg = _resolve_config(args.config, args.seed)
    records = parse_manifest(args.manifest)
    if not records:
        raise ManifestError(f"manifest {args.manifest} has no records")
    space = _build_space(cfg)
    policy = _load_policy(args.ckpt, space)
    loaded = load_records(records, cfg.image_size)
    counts = np.zeros((st.N_ELEMENTS, st.MAX_CHOICES), dtype=np.int64)
    active_totals = np.zeros(st.N_ELEMENTS, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2)))
    for i in range(args.n):
        rec = loaded[i % len(loaded)]
        sv, _ = policy.sample_style(rec.state, rng)
        for e, c in enumerate(sv.choices):
            if c >= 0:
                counts[e, c] += 1
                active_totals[e] += 1
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("element," + ",".join(f"choice{i}" for i in range(st.MAX_CHOICES)) + "\n")
        for e, elem in enumerate(space.elements):
            if active_totals[e] > 0:
                props = counts[e] / active_totals[e]
            else:
                props = np.zeros(st.MAX_CHOICES)
            fh.write(elem.name + "," + ",".join(f"{v:.6f}" for v in props) + "\n")
    print(f"wrote per-element choice proportions to {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "mser": _cmd_mser,
    "policy-stats": _cmd_policy_stats,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return err.code if err.code is not None else 2
    try:
        return _COMMANDS[args.command](args)
    except VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except SteError as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return 3
    except OSError as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
