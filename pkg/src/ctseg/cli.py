"""Command-line entry point exposing every pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data error. Every command writes
a run manifest (JSON) alongside its primary output so that stochastic
runs can be reproduced from the recorded seed and flags.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentConfig, apply_policy
from .dataset import FoldPlan, assign_folds, load_manifest
from .ensemble import stacked_predict, train_stacker
from .errors import CtsegError
from .model import (
    PredictorParams,
    TrainConfig,
    predict,
    preprocess_for_inference,
    train,
)
from .objective import LossConfig, aggregate, dice_score, pooled_foreground_dice
from .preprocess import (
    IntensityStats,
    WindowConfig,
    downsample,
    normalize,
    sample_stats,
    select_slices,
    window,
)
from .report import (
    save_dice_figure,
    save_loss_figure,
    write_loss_curve,
    write_metrics_report,
)
from .synth import PhantomConfig, generate_dataset
from .volume import (
    load_labels,
    load_probmap,
    load_volume,
    save_labels,
    save_probmap,
    save_volume,
)


def _write_run_manifest(primary_output, command, args, started, extra=None):
    record = {
        "command": command,
        "tool_version": __version__,
        "argv": {k: v for k, v in vars(args).items() if k != "func"},
        "wall_seconds": round(time.time() - started, 3),
    }
    if extra:
        record.update(extra)
    path = Path(str(primary_output) + ".run.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, default=str)
        fh.write("\n")


def _window_cfg(args):
    return WindowConfig(q_low=args.q_low, q_high=args.q_high)


def cmd_synth(args):
    started = time.time()
    base = PhantomConfig(dims=(args.size, args.size, 24))
    manifest = generate_dataset(
        args.n, args.out,
        slice_range=(args.slice_min, args.slice_max),
        thickness_range=(args.thick_min, args.thick_max),
        seed=args.seed, base_cfg=base,
    )
    out = Path(args.out) / "manifest.tsv"
    _write_run_manifest(out, "synth", args, started,
                        {"n_volumes": len(manifest)})
    print(f"wrote {len(manifest)} phantoms under {args.out}")
    return 0


def cmd_stats(args):
    started = time.time()
    manifest = load_manifest(args.manifest)
    stats = sample_stats(
        manifest, _window_cfg(args),
        sample_fraction=args.fraction, seed=args.seed,
    )
    stats.save(args.out)
    _write_run_manifest(args.out, "stats", args, started)
    print(f"mean={stats.mean:.6g} std={stats.std:.6g} "
          f"from {stats.n_volumes_sampled} volumes")
    return 0


def cmd_preprocess(args):
    started = time.time()
    vol = load_volume(args.volume)
    lab = load_labels(args.labels) if args.labels else None
    vol = window(vol, _window_cfg(args))
    if args.stats:
        vol = normalize(vol, IntensityStats.load(args.stats))
    if args.slices > 0:
        vol, lab = select_slices(
            vol, lab, k=args.slices, training=args.training, seed=args.seed
        )
    if args.size > 0:
        vol, lab = downsample(vol, lab, target=args.size)
    save_volume(vol, args.out)
    if lab is not None and args.labels_out:
        save_labels(lab, args.labels_out)
    _write_run_manifest(args.out, "preprocess", args, started)
    return 0


def cmd_augment(args):
    started = time.time()
    vol = load_volume(args.volume)
    lab = load_labels(args.labels) if args.labels else None
    cfg = AugmentConfig(
        noise_sigma=args.noise_sigma, skip_rate=args.skip_rate,
        interp_insert_rate=args.interp_rate, shift_max=args.shift_max,
        rot_max_deg=args.rot_max, policy_3d=args.policy_3d,
        policy_2d=args.policy_2d, shift_prob=args.shift_prob,
    )
    batch, trace = apply_policy([(vol, lab)], cfg, mode=args.mode, seed=args.seed)
    out_vol, out_lab = batch[0]
    save_volume(out_vol, args.out)
    if out_lab is not None and args.labels_out:
        save_labels(out_lab, args.labels_out)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write(trace.as_line(0) + "\n")
    _write_run_manifest(args.out, "augment", args, started,
                        {"applied": list(trace.applied)})
    return 0


def cmd_folds(args):
    started = time.time()
    manifest = load_manifest(args.manifest)
    plan = assign_folds(manifest, k=args.k)
    plan.save(args.out)
    _write_run_manifest(args.out, "folds", args, started)
    for i, fold in enumerate(plan.folds):
        print(f"fold {i}: {' '.join(fold)}")
    return 0


def cmd_train(args):
    started = time.time()
    manifest = load_manifest(args.manifest)
    plan = FoldPlan.load(args.folds)
    cfg = TrainConfig(
        mode=args.mode,
        batch_size=args.batch if args.batch > 0 else None,
        max_epochs=args.epochs, patience=args.patience,
        tolerance=args.tolerance, seed=args.seed,
        slices=args.slices, target_size=args.size,
        sample_fraction=args.fraction, lr=args.lr,
        loss=LossConfig(alpha=args.alpha, beta=args.beta, smooth=args.smooth),
        augment=AugmentConfig(rot_max_deg=args.rot_max),
        window=_window_cfg(args),
    )
    params, log, stats = train(manifest, plan, args.fold, cfg)
    params.save(args.out)
    stats.save(str(args.out) + ".stats")
    log_path = str(args.out) + ".log.tsv"
    write_loss_curve(log, log_path)
    save_loss_figure(log, str(args.out) + ".loss.png",
                     title=f"fold {args.fold} ({args.mode})")
    _write_run_manifest(args.out, "train", args, started, {
        "epochs_run": len(log),
        "best_val_loss": min((e.val_loss for e in log), default=None),
    })
    if log:
        print(f"trained {len(log)} epochs, "
              f"best val loss {min(e.val_loss for e in log):.6f}")
    return 0


def cmd_predict(args):
    started = time.time()
    params = PredictorParams.load(args.params)
    vol = load_volume(args.volume)
    stats = IntensityStats.load(args.stats)
    cfg = TrainConfig(target_size=args.size, window=_window_cfg(args),
                      num_classes=params.num_classes)
    pvol, _ = preprocess_for_inference(vol, None, cfg, stats)
    pm = predict(params, pvol)
    save_probmap(pm, args.out)
    if args.labels_out:
        save_labels(pm.argmax_labels(), args.labels_out)
    _write_run_manifest(args.out, "predict", args, started)
    return 0


def cmd_evaluate(args):
    started = time.time()
    manifest = load_manifest(args.manifest)
    per_volume = {}
    for rec in manifest:
        if rec.label_path is None:
            continue
        truth = load_labels(rec.label_path)
        pred_path = Path(args.pred_dir) / f"{rec.id}.lbl"
        pred = load_labels(pred_path)
        entry = {"foreground": pooled_foreground_dice(pred, truth)}
        for c in range(1, truth.num_classes):
            name = {1: "organ", 2: "tumor"}.get(c, f"class{c}")
            entry[name] = dice_score(pred, truth, c)
        per_volume[rec.id] = entry
    if not per_volume:
        print("no labeled volumes to evaluate", file=sys.stderr)
        return 2
    write_metrics_report(per_volume, args.report)
    save_dice_figure(per_volume, str(args.report) + ".png")
    _write_run_manifest(args.report, "evaluate", args, started)
    fg = [entry["foreground"] for entry in per_volume.values()]
    mean, std = aggregate(fg)
    print(f"foreground dice {mean:.4f} +/- {std:.4f} over {len(fg)} volumes")
    return 0


def cmd_stack(args):
    started = time.time()
    if args.fit:
        if not args.members or not args.truth:
            print("stack --fit requires --members and --truth", file=sys.stderr)
            return 1
        member_maps = [
            [load_probmap(p) for p in group.split(",")] for group in args.members
        ]
        truths = [load_labels(p) for p in args.truth]
        params = train_stacker(
            member_maps, truths, seed=args.seed, epochs=args.epochs, lr=args.lr,
        )
        params.save(args.out)
        _write_run_manifest(args.out, "stack-fit", args, started)
        return 0
    if not args.members:
        print("stack requires --members (one comma-free probmap path each)",
              file=sys.stderr)
        return 1
    maps = [load_probmap(p) for p in args.members]
    stacker = PredictorParams.load(args.stacker) if args.stacker else None
    combiner = "STACKER" if stacker is not None else args.combiner
    pm, labels = stacked_predict(maps, combiner=combiner, stacker=stacker)
    save_probmap(pm, args.out)
    if args.labels_out:
        save_labels(labels, args.labels_out)
    _write_run_manifest(args.out, "stack", args, started)
    return 0


def cmd_selftest(args):
    started = time.time()
    import io

    from .objective import adam_step, AdamState, combined_loss, tanimoto_loss
    from .synth import generate_phantom
    from .volume import read_volume, write_volume

    failures = []

    def check(name, ok):
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        if not ok:
            failures.append(name)

    vol, lab = generate_phantom(PhantomConfig(), seed=1)
    buf = io.BytesIO()
    write_volume(vol, buf)
    buf.seek(0)
    back = read_volume(buf)
    check("volume round trip",
          back.dims == vol.dims and np.array_equal(back.voxels, vol.voxels))

    per_class, mean = tanimoto_loss(
        np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.0], [0.0, 1.0]])
    )
    check("tanimoto zero at perfect prediction", abs(mean) < 1e-12)

    loss, _ = combined_loss(
        np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.0], [0.0, 1.0]])
    )
    check("combined loss zero at perfect prediction", abs(loss) < 1e-9)

    p, s = adam_step(np.zeros(3), np.zeros(3), AdamState.init(3))
    check("adam zero-gradient identity", np.all(p == 0) and s.step == 1)

    win = window(vol, WindowConfig())
    check("window bounds", win.voxels.min() < win.voxels.max())

    _write_run_manifest(args.out, "selftest", args, started,
                        {"failures": failures})
    return 0 if not failures else 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_window_flags(p):
    p.add_argument("--q-low", type=float, default=0.6)
    p.add_argument("--q-high", type=float, default=0.99)


def build_parser():
    parser = _Parser(prog="ctseg", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--slice-min", type=int, default=12)
    p.add_argument("--slice-max", type=int, default=32)
    p.add_argument("--thick-min", type=float, default=1.0)
    p.add_argument("--thick-max", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="sampled windowed-intensity statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    _add_window_flags(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("preprocess", help="window/normalize/slice/downsample")
    p.add_argument("--volume", required=True)
    p.add_argument("--labels")
    p.add_argument("--out", required=True)
    p.add_argument("--labels-out")
    p.add_argument("--stats")
    p.add_argument("--slices", type=int, default=0,
                   help="target slice count (0 = keep all)")
    p.add_argument("--size", type=int, default=0,
                   help="in-plane target (0 = keep size)")
    p.add_argument("--training", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    _add_window_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("augment", help="apply the augmentation chain")
    p.add_argument("--volume", required=True)
    p.add_argument("--labels")
    p.add_argument("--out", required=True)
    p.add_argument("--labels-out")
    p.add_argument("--trace")
    p.add_argument("--mode", choices=["2D", "3D"], default="2D")
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--skip-rate", type=float, default=0.1)
    p.add_argument("--interp-rate", type=float, default=0.1)
    p.add_argument("--shift-max", type=float, default=0.1)
    p.add_argument("--rot-max", type=float, default=16.0)
    p.add_argument("--policy-2d", type=float, default=0.9)
    p.add_argument("--policy-3d", type=float, default=0.8)
    p.add_argument("--shift-prob", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("folds", help="slice-count-sorted fold plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("train", help="train the reference segmenter")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["2D", "3D"], default="2D")
    p.add_argument("--batch", type=int, default=0,
                   help="override batch size (0 = mode default: 2D 28, 3D 1)")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--slices", type=int, default=16)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--beta", type=float, default=0.4)
    p.add_argument("--smooth", type=float, default=1e-5)
    p.add_argument("--rot-max", type=float, default=16.0)
    p.add_argument("--seed", type=int, default=0)
    _add_window_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="probability map for one volume")
    p.add_argument("--params", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels-out")
    p.add_argument("--size", type=int, default=128)
    _add_window_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="Dice report against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", required=True,
                   help="directory of predicted <id>.lbl files")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stack", help="train or apply the stacked ensemble")
    p.add_argument("--fit", action="store_true")
    p.add_argument("--members", action="append", default=[],
                   help="probmap path; with --fit, comma-separated member "
                        "maps for one volume (repeatable)")
    p.add_argument("--truth", action="append", default=[],
                   help="truth label path per volume (with --fit)")
    p.add_argument("--stacker", help="stacker PRM1 file (apply mode)")
    p.add_argument("--combiner", choices=["MEAN", "WEIGHTED"], default="MEAN")
    p.add_argument("--out", required=True)
    p.add_argument("--labels-out")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stack)

    p = sub.add_parser("selftest", help="quick invariant checks")
    p.add_argument("--out", default="selftest")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except CtsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
