"""Command-line entry point: ``talkinghead <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import Config, load_config
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .geometry import Intrinsics, Pose, orbit_pose
from .metrics import psnr
from .refiner import face_mask
from .sync import cosine_sim, sync_margin, prepare_sync_data, train_sync
from .synth import crop_lips, read_collection, read_dataset, synth_identity, synth_sequence, write_dataset
from .tensor import no_grad

log = logging.getLogger("talkinghead")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config(path) -> Config:
    return load_config(path) if path else Config()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    out = Path(args.out)
    for k in range(args.sequences):
        seed = args.seed + k
        seq = synth_sequence(synth_identity(seed), args.frames, seed, size=args.size,
                             cam_distance=args.cam_distance)
        target = out if args.sequences == 1 else out / f"seq_{k:03d}"
        write_dataset(seq, target)
        log.info("wrote %d frames to %s", args.frames, target)
    return EXIT_OK


def cmd_train_sync(args) -> int:
    cfg = _config(args.config)
    if args.steps is not None:
        cfg = cfg.replace(sync_steps=args.steps)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    seqs = read_collection(args.data)
    disc, history = train_sync(seqs, cfg, log=log.info)
    io.save_checkpoint(args.out, disc.state_dict())
    pos, neg = sync_margin(disc, prepare_sync_data(seqs, cfg.sync_frames, cfg.lip_h, cfg.lip_w), seed=cfg.seed)
    print(f"final_loss={np.mean(history[-50:]):.6f} heldout_sync_cos={pos:.4f} "
          f"heldout_offset_cos={neg:.4f} margin={pos - neg:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import Trainer, load_sync

    cfg = _config(args.config)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    seq = read_dataset(args.data)
    sync = load_sync(args.sync, cfg) if args.sync else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, seq, sync, log=log.info)
    ckpt = out / "model.ckpt"
    if args.resume and ckpt.exists():
        trainer.load(ckpt)
    elif (out / "loss.log").exists():
        (out / "loss.log").unlink()
    cfg.save(out / "config.txt")
    trainer.run(out_dir=out)
    print(f"trained {trainer.step} steps; checkpoint {ckpt}")
    return EXIT_OK


def _parse_pose(text: str, distance: float) -> Pose:
    try:
        yaw, pitch = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--pose expects YAW,PITCH in degrees, got {text!r}") from exc
    return orbit_pose(np.radians(yaw), np.radians(pitch), distance)


def cmd_render(args) -> int:
    from .train import load_model

    model, source_index = load_model(args.ckpt)
    cfg = model.cfg
    seq = read_dataset(args.data)
    frames = range(seq.n_frames) if args.all else [args.frame]
    for i in frames:
        if not 0 <= i < seq.n_frames:
            raise UsageError(f"--frame {i} outside 0..{seq.n_frames - 1}")
    k = Intrinsics.default(seq.frames.shape[-1])
    out = Path(args.out)
    if args.all:
        out.mkdir(parents=True, exist_ok=True)
    with no_grad():
        ctx = model.prepare(seq.frames[source_index], seq.pose(source_index))
        for i in frames:
            pose = seq.pose(i)
            mask = seq.masks[i]
            if args.pose:
                pose = _parse_pose(args.pose, float(np.linalg.norm(pose.translation)))
                mask = face_mask(seq.identity, pose, k)
            fctx = model.frame(ctx, seq.audio_window(i, cfg.audio_window))
            fine, _ = model.render_fine(ctx, fctx, pose, mask)
            io.write_ppm(out / f"{i:05d}.ppm" if args.all else out, fine.data.astype(np.float64))
            if args.heatmap and not args.all:
                io.write_pgm(args.heatmap, model.heatmap(fctx))
    return EXIT_OK


def _frame_files(directory: Path) -> list[Path]:
    d = directory / "frames" if (directory / "frames").is_dir() else directory
    files = sorted(d.glob("*.ppm"))
    if not files:
        raise FormatError(d, "no .ppm frames found")
    return files


def cmd_eval(args) -> int:
    pred_files = _frame_files(Path(args.pred))
    gt_files = _frame_files(Path(args.gt))
    if len(pred_files) != len(gt_files):
        raise UsageError(f"frame counts differ: {len(pred_files)} predicted vs {len(gt_files)} ground truth")
    preds, scores = [], []
    for n, (pf, gf) in enumerate(zip(pred_files, gt_files)):
        pred = io.read_ppm(pf).astype(np.float64) / 255.0
        gt = io.read_ppm(gf).astype(np.float64) / 255.0
        if pred.shape != gt.shape:
            raise UsageError(f"{pf}: extents {pred.shape} differ from {gf}: {gt.shape}")
        preds.append(pred)
        scores.append(psnr(pred, gt))
        print(f"frame={n} psnr={scores[-1]:.4f}")
    summary = f"mean_psnr={np.mean(scores):.4f} frames={len(scores)}"
    if args.sync:
        seq = read_dataset(args.gt)
        cfg = _config(args.config)
        from .train import load_sync

        disc = load_sync(args.sync, cfg)
        gen, off = _sync_cosines(disc, seq, np.stack(preds), cfg)
        summary += f" sync_cos={gen:.4f} offset_cos={off:.4f}"
    print(summary)
    return EXIT_OK


def _sync_cosines(disc, seq, frames: np.ndarray, cfg: Config) -> tuple[float, float]:
    """Mean cosine of generated lip windows against synchronised and offset audio."""
    t = cfg.sync_frames
    crops = np.stack([crop_lips(frames[i], seq.lipboxes[i], cfg.lip_h, cfg.lip_w) for i in range(len(frames))])
    starts = list(range(0, len(frames) - t + 1))
    if not starts:
        raise UsageError(f"need at least {t} frames for sync evaluation")
    sync_vals, off_vals = [], []
    with no_grad():
        for s in starts:
            e_l = disc.embed_lips(crops[s:s + t].astype(np.float32))
            sync_vals.append(cosine_sim(e_l, disc.embed_audio(seq.audio_clip(s, t).astype(np.float32))).item())
            far = [o for o in starts if abs(o - s) >= t]
            if far:
                o = far[len(far) // 2]
                off_vals.append(cosine_sim(e_l, disc.embed_audio(seq.audio_clip(o, t).astype(np.float32))).item())
    return float(np.mean(sync_vals)), float(np.mean(off_vals)) if off_vals else float("nan")


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_report, run_gradcheck

    results = run_gradcheck(tol=args.tol, seed=args.seed)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="talkinghead", description="Single-shot audio-driven talking-head radiance field.",
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic speaker sequences", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="identity and sequence seed")
    p.add_argument("--frames", type=int, default=16, help="frames per sequence")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--sequences", type=int, default=1, help="number of sequences (DIR/seq_XXX when > 1)")
    p.add_argument("--size", type=int, default=128, help="frame width and height in pixels")
    p.add_argument("--cam-distance", type=float, default=2.0, help="nominal camera distance")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-sync", help="train the lip-sync discriminator", formatter_class=fmt)
    p.add_argument("--data", required=True, help="directory of sequences (at least two)")
    p.add_argument("--out", required=True, help="output checkpoint file")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--steps", type=int, default=None, help="override sync_steps")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_train_sync)

    p = sub.add_parser("train", help="train the generator on one sequence", formatter_class=fmt)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--sync", default=None, help="sync discriminator checkpoint (required unless lambda_sync=0)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, default=None, help="override the config step count")
    p.add_argument("--resume", action="store_true", help="continue from OUT/model.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render frames from a trained checkpoint", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="generator checkpoint")
    p.add_argument("--data", required=True, help="dataset directory (driving audio, poses)")
    p.add_argument("--frame", type=int, default=0, help="frame index")
    p.add_argument("--pose", default=None, help="override view as YAW,PITCH in degrees")
    p.add_argument("--out", required=True, help="output .ppm (a directory with --all)")
    p.add_argument("--all", action="store_true", help="render every frame into OUT/")
    p.add_argument("--heatmap", default=None, help="also write the attention heatmap (.pgm)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR and sync-cosine of predicted frames", formatter_class=fmt)
    p.add_argument("--pred", required=True, help="directory of predicted .ppm frames")
    p.add_argument("--gt", required=True, help="ground-truth dataset directory")
    p.add_argument("--sync", default=None, help="sync discriminator checkpoint for sync-cosine")
    p.add_argument("--config", default=None, help="config used to build the sync discriminator")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all operations", formatter_class=fmt)
    p.add_argument("--tol", type=float, default=1e-4, help="relative tolerance")
    p.add_argument("--seed", type=int, default=0, help="input seed")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
