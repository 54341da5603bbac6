"""Command-line entry point: phantom, train, translate, evaluate, repro-desk.

Every run that produces outputs also writes a run manifest (seed, resolved
configuration, inputs, outputs, timestamps) next to them, sufficient to
re-run the command exactly. Values given on the command line win over values
from a config file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import __version__
from .errors import ToolkitError, ValidationError
from .evaluate import DEFAULT_BIN_WIDTH, DEFAULT_CLIP, evaluate_run
from .phantom import ArtifactParams, generate_pairs, load_manifest
from .preprocess import split_dataset
from .train import TrainConfig, load_checkpoint, load_train_config, train
from .translate import DIRECTIONS, TranslationJob, list_input_volumes, run_translation
from .volume import load_volume

DESK_MODES = ("feedback", "unetgan", "cyclegan")


def determinism_mode() -> str:
    return "bitexact" if not torch.cuda.is_available() else "tolerance-1e-3"


def write_manifest(out_dir, subcommand: str, config: dict, seed, inputs, outputs, started) -> Path:
    """Atomic write of the run manifest next to the command's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "toolkit_version": __version__,
        "started_at": started,
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "inputs": inputs,
        "outputs": outputs,
        "determinism_mode": determinism_mode(),
    }
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    target = out_dir / "run_manifest.json"
    os.replace(tmp, target)
    return target


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _parse_ints(text: str, n: int | None = None, name: str = "value") -> tuple[int, ...]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError as e:
        raise ValidationError(f"cannot parse {name} {text!r}: {e}") from e
    if n is not None and len(parts) != n:
        raise ValidationError(f"{name} needs {n} comma-separated ints, got {text!r}")
    return parts


def _parse_floats(text: str, n: int, name: str) -> tuple[float, ...]:
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError as e:
        raise ValidationError(f"cannot parse {name} {text!r}: {e}") from e
    if len(parts) != n:
        raise ValidationError(f"{name} needs {n} comma-separated numbers, got {text!r}")
    return parts


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    started = _now()
    artifacts = ArtifactParams(
        global_shift=args.global_shift,
        cupping_amp=args.cupping_amp,
        streak_amp=args.streak_amp,
        streak_count=args.streak_count,
        noise_sd=args.noise_sd,
        seed=args.seed,
    )
    shape = _parse_ints(args.shape, 3, "--shape")
    manifest = generate_pairs(
        args.out, args.pairs, shape, args.seed, artifacts,
        texture_sd=args.texture_sd, jitter=args.jitter,
    )
    outputs = [p["ct"] for p in manifest["pairs"]] + [p["cbct"] for p in manifest["pairs"]]
    write_manifest(
        args.out, "phantom",
        {"shape": list(shape), "pairs": args.pairs, "artifacts": manifest["artifacts"],
         "texture_sd": args.texture_sd, "jitter": args.jitter},
        args.seed, [], outputs, started,
    )
    print(f"wrote {len(manifest['pairs'])} CT/CBCT pairs to {args.out}")
    return 0


def _resolved_train_config(args) -> TrainConfig:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.data is not None:
        overrides["data_dir"] = args.data
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        d = cfg.to_dict()
        d.update(overrides)
        cfg = TrainConfig.from_dict(d)
    return cfg


def cmd_train(args) -> int:
    started = _now()
    cfg = _resolved_train_config(args)
    result = train(cfg, resume=args.resume)
    write_manifest(
        cfg.out_dir or ".", "train", cfg.to_dict(), cfg.seed,
        [cfg.data_dir] + ([args.resume] if args.resume else []),
        [result["final_checkpoint"], result["metrics_csv"]], started,
    )
    print(f"trained {result['epochs_run']} epochs, checkpoint at {result['final_checkpoint']}")
    return 0


def cmd_translate(args) -> int:
    started = _now()
    inputs = list_input_volumes(args.input)
    job = TranslationJob(
        checkpoint=args.ckpt, inputs=inputs, out_dir=args.out, direction=args.direction
    )
    written = run_translation(job)
    write_manifest(
        args.out, "translate",
        {"ckpt": args.ckpt, "direction": args.direction},
        None, inputs, written, started,
    )
    print(f"translated {len(written)} volumes into {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    started = _now()
    clip = _parse_floats(args.clip, 2, "--clip")
    roi = _parse_ints(args.roi, 6, "--roi")
    synth = {}
    for item in args.synth or []:
        if "=" not in item:
            raise ValidationError(f"--synth expects NAME=FILE, got {item!r}")
        name, path = item.split("=", 1)
        synth[name] = [load_volume(path)]
    report = evaluate_run(
        originals=[load_volume(args.orig)],
        translated=synth,
        references=[load_volume(args.ref)],
        roi_centers=[roi[:3]],
        roi_size=roi[3:],
        clip=clip,
        bin_width=args.bin_width,
        out_dir=args.out,
    )
    write_manifest(
        args.out, "evaluate",
        {"clip": list(clip), "bin_width": args.bin_width, "roi": list(roi)},
        None, [args.ref, args.orig] + list(args.synth or []),
        ["report.csv"], started,
    )
    for row in report.aggregate():
        print(f"{row.method:>12}: mean {row.mean_hu:+8.1f} HU, sd {row.sd_hu:6.1f}, r {row.corr_r:+.3f}")
    return 0


# ---------------------------------------------------------------------------
# repro-desk: phantom -> train (all modes) -> translate -> evaluate
# ---------------------------------------------------------------------------

DESK_ARTIFACTS = dict(global_shift=-76.0, cupping_amp=30.0, streak_amp=15.0, streak_count=9, noise_sd=8.0)
DESK_TEXTURE_SD = 18.0
DESK_WIDTHS = (16, 32, 64)


def run_desk_experiment(
    out_dir,
    seed: int = 7,
    epochs: int = 150,
    train_pairs: int = 30,
    test_pairs: int = 5,
    size: int = 64,
    slices: int = 6,
    modes=DESK_MODES,
    widths=DESK_WIDTHS,
    batch_size: int = 4,
) -> dict:
    """Seeded end-to-end phantom experiment comparing the translation modes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_pairs = train_pairs + test_pairs

    data_dir = out_dir / "phantoms"
    artifacts = ArtifactParams(seed=seed, **DESK_ARTIFACTS)
    manifest = generate_pairs(
        data_dir, n_pairs, (slices, size, size), seed, artifacts, texture_sd=DESK_TEXTURE_SD
    )
    split = split_dataset(list(range(n_pairs)), train_pairs / n_pairs, seed)

    checkpoints = {}
    for mode in modes:
        cfg = TrainConfig(
            mode=mode,
            batch_size=batch_size,
            epochs=epochs,
            seed=seed,
            data_dir=str(data_dir),
            out_dir=str(out_dir / f"train_{mode}"),
            image_size=size,
            gen_widths=widths,
            disc_widths=widths,
            fov_radius_frac=0.95,
            checkpoint_every=max(1, epochs // 2),
            pairs=split.train_ids,
        )
        result = train(cfg)
        checkpoints[mode] = result["final_checkpoint"]

    by_id = {p["id"]: p for p in manifest["pairs"]}
    originals, references, centers, case_names = [], [], [], []
    translated: dict[str, list] = {mode: [] for mode in modes}
    roi_size = (min(8, slices), size // 2, size // 2)
    from .translate import translate_volume

    states = {mode: load_checkpoint(ckpt) for mode, ckpt in checkpoints.items()}
    for pid in split.test_ids:
        pair = by_id[pid]
        cbct = load_volume(data_dir / pair["cbct"])
        ct = load_volume(data_dir / pair["ct"])
        center = list(pair["prostate_center"])
        # Clamp so the ROI window stays inside the volume.
        for axis, s in enumerate(roi_size):
            n = cbct.shape[axis]
            center[axis] = min(max(center[axis], s // 2), n - s + s // 2)
        originals.append(cbct)
        references.append(ct)
        centers.append(tuple(center))
        case_names.append(f"pair{pid:04d}")
        for mode in modes:
            translated[mode].append(translate_volume(cbct, states[mode], "x2y"))

    eval_dir = out_dir / "eval"
    report = evaluate_run(
        originals, translated, references, centers, roi_size,
        clip=DEFAULT_CLIP, bin_width=DEFAULT_BIN_WIDTH, out_dir=eval_dir,
        case_names=case_names,
    )

    summary = {
        "report_csv": str(eval_dir / "report.csv"),
        "checkpoints": checkpoints,
        "test_ids": split.test_ids,
        "mean_corr": {m: report.mean_corr(m) for m in list(modes) + ["original"]},
    }
    ordering = sorted(modes, key=lambda m: -summary["mean_corr"][m])
    summary["mode_ordering_by_corr"] = ordering
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=1)
        f.write("\n")
    return summary


def cmd_repro_desk(args) -> int:
    started = _now()
    modes = tuple(args.modes.split(","))
    for m in modes:
        if m not in DESK_MODES:
            raise ValidationError(f"unknown mode {m!r}, choose from {DESK_MODES}")
    summary = run_desk_experiment(
        args.out,
        seed=args.seed,
        epochs=args.epochs,
        train_pairs=args.train_pairs,
        test_pairs=args.test_pairs,
        size=args.size,
        slices=args.slices,
        modes=modes,
        batch_size=args.batch_size,
    )
    config = {k: getattr(args, k) for k in
              ("epochs", "train_pairs", "test_pairs", "size", "slices", "modes", "batch_size")}
    write_manifest(args.out, "repro-desk", config, args.seed, [],
                   [summary["report_csv"]] + list(summary["checkpoints"].values()), started)
    print("mean histogram correlation vs reference:")
    for method, r in sorted(summary["mean_corr"].items(), key=lambda kv: -kv[1]):
        print(f"  {method:>12}: {r:+.3f}")
    print("mode ordering by correlation:", " >= ".join(summary["mode_ordering_by_corr"]))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbgan",
        description="Feedback-assisted adversarial CBCT-to-CT translation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate aligned CT/CBCT phantom pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pairs", type=int, default=10, help="number of CT/CBCT pairs")
    p.add_argument("--shape", default="6,64,64", help="volume shape Z,Y,X")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--global-shift", type=float, default=-76.0, help="body-wide HU shift")
    p.add_argument("--cupping-amp", type=float, default=30.0, help="radial bias amplitude, HU")
    p.add_argument("--streak-amp", type=float, default=15.0, help="streak amplitude, HU")
    p.add_argument("--streak-count", type=int, default=9, help="streaks per revolution")
    p.add_argument("--noise-sd", type=float, default=8.0, help="added noise SD, HU")
    p.add_argument("--texture-sd", type=float, default=18.0, help="CT tissue texture SD, HU")
    p.add_argument("--jitter", action="store_true", help="shift CBCT by up to 1 voxel in-plane")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train an image translation model")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--mode", choices=("feedback", "unetgan", "cyclegan"), help="training mode")
    p.add_argument("--data", help="phantom data directory")
    p.add_argument("--out", help="output directory for checkpoints and metrics")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--epochs", type=int, help="number of epochs")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate volumes with a trained checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--in", dest="input", required=True, help="input volume or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--direction", choices=DIRECTIONS, default="x2y", help="translation direction")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="evaluate translated volumes against a reference")
    p.add_argument("--ref", required=True, help="reference CT volume")
    p.add_argument("--orig", required=True, help="original (untranslated) volume")
    p.add_argument("--synth", action="append", help="NAME=FILE translated volume, repeatable")
    p.add_argument("--roi", required=True, help="ROI as z,y,x,dz,dy,dx")
    p.add_argument("--clip", default=f"{DEFAULT_CLIP[0]:g},{DEFAULT_CLIP[1]:g}", help="clip window lo,hi")
    p.add_argument("--bin-width", type=float, default=DEFAULT_BIN_WIDTH, help="histogram bin width, HU")
    p.add_argument("--out", required=True, help="output directory for report.csv and plots")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("repro-desk", help="seeded end-to-end desk-scale experiment")
    p.add_argument("--out", required=True, help="experiment directory")
    p.add_argument("--seed", type=int, default=7, help="experiment seed")
    p.add_argument("--epochs", type=int, default=150, help="training epochs per mode")
    p.add_argument("--train-pairs", type=int, default=30, help="training pair count")
    p.add_argument("--test-pairs", type=int, default=5, help="test pair count")
    p.add_argument("--size", type=int, default=64, help="slice size in pixels")
    p.add_argument("--slices", type=int, default=6, help="slices per volume")
    p.add_argument("--modes", default=",".join(DESK_MODES), help="comma-separated mode list")
    p.add_argument("--batch-size", type=int, default=4, help="training batch size")
    p.set_defaults(func=cmd_repro_desk)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ToolkitError as e:
        print(f"{e.category} error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
