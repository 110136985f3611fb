"""Command-line entry point: ``posture-forecaster <subcommand> ...``.

Every subcommand writes ``run_manifest.json`` into its output directory. The
effective configuration is resolved as flags > ``--config`` JSON file >
built-in defaults, and the result is echoed into the manifest.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NonFiniteGradientError
from .evaluation import (ablation_constraint_effect, evaluate_rollouts, format_mean_std, loso,
                         one_step_predictions, per_frame_rmse, rmse, rollout_predictions, nrmse, r_squared)
from .models import Checkpoint
from .motion import io as mio
from .motion.markers import MARKER_NAMES, SEGMENT_NAMES
from .motion.preprocess import N_FRAMES, WINDOW, preprocess_task, recording_meta, split_by_subject
from .motion.synthetic import synthesize_dataset
from .plotting import line_chart, skeleton_snapshots
from .rollout import RolloutError, whole_body_rollout
from .training import BEST_COEFFICIENT, TrainConfig, TrainingDivergedError

log = logging.getLogger("posture_forecaster")

SEED_ENV = "POSTURE_FORECASTER_SEED"
MANIFEST_FILE = "run_manifest.json"
SNAPSHOT_FRAMES = (1, 25, 50, 75, 90, 101)
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


MODEL_DEFAULTS = {
    "hidden_units": 128, "model_width": 96, "heads": 16, "encoder_layers": 1, "decoder_layers": 3,
    "feedforward_width": 512, "head_hidden": 64, "dropout": 0.25, "residual": False,
}
TRAIN_DEFAULTS = {
    # None means "per-model value": BLSTM 150 / 256 / 0.01, transformer 200 / 512 / 0.001
    "epochs": None, "batch_size": None, "lr": None,
    "lr_factor": 0.1, "lr_patience": 5, "min_lr": 1e-7, "early_stop_patience": 15,
    "a": 0.0, "constraint_space": "mm",
}
# compact transformer used for the ablation so that 12 runs fit a single CPU; the residual
# output lets it generalise to unseen subjects from a handful of training subjects
ABLATION_MODEL = {"model_width": 32, "heads": 4, "encoder_layers": 1, "decoder_layers": 1,
                  "feedforward_width": 64, "head_hidden": 64, "dropout": 0.1, "residual": True}
ABLATION_TRAIN = {"batch_size": 128, "constraint_space": "normalized"}

DEFAULTS = {
    "synth": {"subjects": 6, "tasks_per_subject": 24},
    "preprocess": {"filter": True, "cutoff": 10.0, "order": 4, "frames": N_FRAMES},
    "train": {"segment": "arms", "model": "transformer", **TRAIN_DEFAULTS, **MODEL_DEFAULTS},
    "rollout": {"seed_frames": None},
    "eval": {"subjects": None},
    "loso": {"model": "transformer", "segments": list(SEGMENT_NAMES), "jobs": 1, **TRAIN_DEFAULTS,
             **MODEL_DEFAULTS},
    "ablate": {"seeds": [0, 1, 2], "jobs": 1, "a_arms": BEST_COEFFICIENT["arms"],
               "a_legs": BEST_COEFFICIENT["legs"], **{k: v for k, v in TRAIN_DEFAULTS.items() if k != "a"},
               **MODEL_DEFAULTS, **ABLATION_MODEL, **ABLATION_TRAIN},
    "report": {"subjects": None},
}


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# -- parser ---------------------------------------------------------------------------


def _opt(p, command: str, flag: str, help: str, **kw):
    key = flag.lstrip("-").replace("-", "_")
    default = DEFAULTS[command].get(key)
    p.add_argument(flag, default=argparse.SUPPRESS, help=f"{help} (default: {default})", **kw)


def _model_flags(p, command):
    _opt(p, command, "--hidden-units", "BLSTM hidden units", type=int)
    _opt(p, command, "--model-width", "transformer expander width d", type=int)
    _opt(p, command, "--heads", "attention heads per layer", type=int)
    _opt(p, command, "--encoder-layers", "transformer encoder layers", type=int)
    _opt(p, command, "--decoder-layers", "transformer decoder layers", type=int)
    _opt(p, command, "--feedforward-width", "transformer feed-forward width", type=int)
    _opt(p, command, "--head-hidden", "units in the output head", type=int)
    _opt(p, command, "--dropout", "dropout probability", type=float)
    _opt(p, command, "--residual", "transformer predicts the change from the last input frame",
         action=argparse.BooleanOptionalAction)


def _train_flags(p, command, with_a: bool = True):
    _opt(p, command, "--epochs", "epoch budget; None picks the per-model value", type=int)
    _opt(p, command, "--batch-size", "mini-batch size; None picks the per-model value", type=int)
    _opt(p, command, "--lr", "initial learning rate; None picks the per-model value", type=float)
    _opt(p, command, "--lr-factor", "plateau scheduler factor", type=float)
    _opt(p, command, "--lr-patience", "plateau scheduler patience in epochs", type=int)
    _opt(p, command, "--min-lr", "learning-rate floor", type=float)
    _opt(p, command, "--early-stop-patience", "epochs without validation improvement before stopping",
         type=int)
    if with_a:
        _opt(p, command, "--a", "kinematic constraint coefficient", type=float)
    _opt(p, command, "--constraint-space", "space of the constraint term", choices=["mm", "normalized"])
    _model_flags(p, command)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posture-forecaster",
                                     description="Segment-wise posture forecasting for load-reaching tasks.")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help=f"seed for every random choice of the run (default: ${SEED_ENV} or 0)")
    common.add_argument("--config", type=Path, default=None,
                        help="JSON file of option values; flags given explicitly take precedence (default: None)")
    common.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    _opt(p, "synth", "--subjects", "number of synthetic subjects", type=int)
    _opt(p, "synth", "--tasks-per-subject", "reachable tasks per subject", type=int)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("preprocess", parents=[common], help="filter and resample a dataset to 101 frames")
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest")
    _opt(p, "preprocess", "--filter", "apply the zero-lag low-pass filter",
         action=argparse.BooleanOptionalAction)
    _opt(p, "preprocess", "--cutoff", "filter cut-off in Hz", type=float)
    _opt(p, "preprocess", "--order", "Butterworth order", type=int)
    _opt(p, "preprocess", "--frames", "frames after resampling", type=int)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("train", parents=[common], help="train one segment model")
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest (101-frame tasks)")
    _opt(p, "train", "--segment", "segment to model", choices=list(SEGMENT_NAMES))
    _opt(p, "train", "--model", "architecture", choices=["blstm", "transformer"])
    _train_flags(p, "train")
    p.add_argument("--out", type=Path, required=True, help="output directory for checkpoint and history")

    p = sub.add_parser("rollout", parents=[common], help="recursive 76-frame whole-body rollout of one task")
    p.add_argument("--checkpoint-dir", type=Path, required=True, help="directory holding <segment>.npz files")
    p.add_argument("--task", type=Path, required=True, help="task file stem (path without suffixes)")
    _opt(p, "rollout", "--seed-frames", "trajectory file whose first 25 frames replace the measured seed",
         type=Path)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    for name, text in (("eval", "one-step and rollout metrics on held-out subjects"),
                       ("report", "per-frame RMSE curves and posture snapshots as CSV and SVG")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint-dir", type=Path, required=True, help="directory holding <segment>.npz files")
        p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest")
        _opt(p, name, "--subjects", "subjects to evaluate; None uses the test subjects stored in the checkpoints",
             nargs="+")
        p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("loso", parents=[common], help="leave-one-subject-out cross-validation")
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest")
    _opt(p, "loso", "--model", "architecture", choices=["blstm", "transformer"])
    _opt(p, "loso", "--segments", "segments to train per fold", nargs="+", choices=list(SEGMENT_NAMES))
    _opt(p, "loso", "--jobs", "parallel worker processes", type=int)
    _train_flags(p, "loso")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("ablate", parents=[common],
                       help="kinematic-constraint ablation on arms and legs transformers")
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest")
    _opt(p, "ablate", "--seeds", "training seeds", nargs="+", type=int)
    _opt(p, "ablate", "--jobs", "parallel worker processes", type=int)
    _opt(p, "ablate", "--a-arms", "constraint coefficient for the arms model", type=float)
    _opt(p, "ablate", "--a-legs", "constraint coefficient for the legs model", type=float)
    _train_flags(p, "ablate", with_a=False)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Effective options: defaults, overlaid by the config file, overlaid by explicit flags."""
    opts = dict(DEFAULTS[args.command])
    file_seed = None
    if args.config is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"config file {args.config} not found")
        try:
            loaded = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config}: {exc}") from None
        if isinstance(loaded, dict) and isinstance(loaded.get("config"), dict) and "command" in loaded:
            # a previous run manifest: replay its effective configuration
            if loaded["command"] != args.command:
                raise UsageError(f"manifest {args.config} is for {loaded['command']!r}, not {args.command!r}")
            loaded = loaded["config"]
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {args.config} must hold a JSON object")
        file_seed = loaded.pop("seed", None)
        unknown = sorted(set(loaded) - set(opts))
        if unknown:
            raise UsageError(f"config file {args.config}: unknown option(s) {', '.join(unknown)} for "
                             f"{args.command}")
        opts.update(loaded)
    skip = {"command", "config", "log_level", "seed", "out", "data", "checkpoint_dir", "task"}
    opts.update({k: v for k, v in vars(args).items() if k not in skip})
    if args.seed is not None:
        opts["seed"] = args.seed
    elif args.config is not None and file_seed is not None:
        opts["seed"] = int(file_seed)
    else:
        opts["seed"] = default_seed()
    return opts


# -- helpers --------------------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, np.generic):
        return v.item()
    return v


def write_manifest(out: Path, command: str, opts: dict, inputs: dict, outputs: list[str], started: float):
    manifest = {
        "command": command,
        "config": {k: _jsonable(v) for k, v in sorted(opts.items())},
        "seed": opts["seed"],
        "inputs": {k: _jsonable(v) for k, v in inputs.items()},
        "outputs": sorted(outputs),
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_clock_s": round(time.time() - started, 3),
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2) + "\n")


def train_config(opts: dict, kind: str, seed: int, a: float | None = None) -> TrainConfig:
    keys = ("epochs", "batch_size", "lr", "lr_factor", "lr_patience", "min_lr", "early_stop_patience",
            "constraint_space")
    over = {k: opts[k] for k in keys if opts.get(k) is not None}
    cfg = TrainConfig.for_model(kind, a=opts.get("a", 0.0) if a is None else a, seed=seed, **over)
    for k in ("epochs", "batch_size", "lr"):
        opts[k] = getattr(cfg, k)  # echo the per-model values into the manifest
    return cfg


def model_overrides(opts: dict, kind: str) -> dict:
    if kind == "blstm":
        return {"hidden_units": opts["hidden_units"]}
    keys = ("model_width", "heads", "encoder_layers", "decoder_layers", "feedforward_width", "head_hidden",
            "dropout", "residual")
    return {k: opts[k] for k in keys}


def load_checkpoints(directory: Path) -> dict[str, Checkpoint]:
    if not directory.is_dir():
        raise FileNotFoundError(f"checkpoint directory {directory} not found")
    found = {}
    for name in SEGMENT_NAMES:
        path = directory / f"{name}.npz"
        if path.exists():
            found[name] = Checkpoint.load(path)
    if not found:
        raise FileNotFoundError(f"no <segment>.npz checkpoints in {directory}")
    return found


def select_subjects(recordings, checkpoints: dict[str, Checkpoint], subjects):
    if subjects is None:
        stored = {s for c in checkpoints.values() for s in c.meta.get("test_subjects", [])}
        if stored:
            subjects = sorted(stored)
    if subjects is None:
        return recordings
    chosen = [r for r in recordings if r.subject_id in set(subjects)]
    if not chosen:
        raise UsageError(f"no tasks for subject(s) {', '.join(subjects)}")
    return chosen


def _require_frames(recordings):
    bad = [r.task_id for r in recordings if r.n_frames != N_FRAMES]
    if bad:
        raise UsageError(f"{len(bad)} task(s) are not {N_FRAMES} frames long (e.g. {bad[0]}); run preprocess first")


# -- commands -------------------------------------------------------------------------


def cmd_synth(args, opts, out: Path) -> list[str]:
    recs = synthesize_dataset(opts["subjects"], opts["tasks_per_subject"], opts["seed"])
    manifest = mio.write_dataset(recs, out)
    return [manifest.name] + [f"{r.task_id}{s}" for r in recs for s in (mio.TRAJECTORY_SUFFIX, mio.META_SUFFIX)]


def cmd_preprocess(args, opts, out: Path) -> list[str]:
    recs = mio.read_dataset(args.data)
    done = [preprocess_task(r, opts["filter"], opts["cutoff"], opts["order"], opts["frames"]) for r in recs]
    manifest = mio.write_dataset(done, out)
    return [manifest.name] + [f"{r.task_id}{s}" for r in done for s in (mio.TRAJECTORY_SUFFIX, mio.META_SUFFIX)]


def cmd_train(args, opts, out: Path) -> list[str]:
    from .evaluation import fit_segment
    recs = mio.read_dataset(args.data)
    _require_frames(recs)
    train_recs, val_recs, test_recs = split_by_subject(recs, opts["seed"])
    kind, segment = opts["model"], opts["segment"]
    cfg = train_config(opts, kind, opts["seed"])
    ckpt, hist = fit_segment(kind, segment, train_recs, val_recs, cfg, model_overrides(opts, kind))
    ckpt.meta.update({
        "train_subjects": sorted({r.subject_id for r in train_recs}),
        "val_subjects": sorted({r.subject_id for r in val_recs}),
        "test_subjects": sorted({r.subject_id for r in test_recs}),
    })
    ckpt.save(out / f"{segment}.npz")
    (out / f"{segment}_history.csv").write_text(hist.to_csv())
    return [f"{segment}.npz", f"{segment}_history.csv"]


def cmd_rollout(args, opts, out: Path) -> list[str]:
    ckpts = load_checkpoints(args.checkpoint_dir)
    rec = mio.read_task(args.task)
    seed_frames = rec.frames[:WINDOW]
    if opts["seed_frames"] is not None:
        frames, names, _ = mio.read_trajectory(opts["seed_frames"])
        if frames.shape[0] < WINDOW:
            raise UsageError(f"seed frame file has {frames.shape[0]} frames, need {WINDOW}")
        order = [names.index(m) for m in MARKER_NAMES if m in names]
        if len(order) != len(MARKER_NAMES):
            raise UsageError("seed frame file lacks some of the 41 markers")
        seed_frames = frames[:WINDOW, order]
    elif rec.marker_names != MARKER_NAMES:
        seed_frames = rec.markers(MARKER_NAMES)[:WINDOW]
    traj, prov = whole_body_rollout(ckpts, seed_frames, recording_meta(rec))
    name = f"{rec.task_id}.rollout.csv"
    mio.write_trajectory(out / name, traj, MARKER_NAMES, prov)
    return [name]


def cmd_eval(args, opts, out: Path) -> list[str]:
    ckpts = load_checkpoints(args.checkpoint_dir)
    recs = select_subjects(mio.read_dataset(args.data), ckpts, opts["subjects"])
    _require_frames(recs)
    lines = ["segment,horizon,rmse_mm,nrmse_pct,r2"]
    for name, ckpt in ckpts.items():
        y, p = one_step_predictions(ckpt, recs)
        lines.append(f"{name},one_step,{rmse(y, p)!r},{nrmse(y, p)!r},{r_squared(y, p)!r}")
    report, curves = evaluate_rollouts(ckpts, recs)
    for name, m in report.rows():
        lines.append(f"{name},rollout,{m.rmse!r},{m.nrmse!r},{m.r2!r}")
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    (out / "rollout_metrics.csv").write_text(report.to_csv())
    _write_curves(out / "rmse_per_frame.csv", curves)
    return ["metrics.csv", "rollout_metrics.csv", "rmse_per_frame.csv"]


def _write_curves(path: Path, curves: dict[str, np.ndarray]):
    names = list(curves)
    lines = ["frame," + ",".join(names)]
    for i in range(N_FRAMES - WINDOW):
        lines.append(f"{WINDOW + i + 1}," + ",".join(repr(float(curves[n][i])) for n in names))
    path.write_text("\n".join(lines) + "\n")


def cmd_report(args, opts, out: Path) -> list[str]:
    ckpts = load_checkpoints(args.checkpoint_dir)
    recs = select_subjects(mio.read_dataset(args.data), ckpts, opts["subjects"])
    _require_frames(recs)
    curves = {}
    for name, ckpt in ckpts.items():
        truth, pred = rollout_predictions(ckpt, recs, name)
        curves[name] = per_frame_rmse(truth, pred)
    _write_curves(out / "rmse_per_frame.csv", curves)
    frames = np.arange(WINDOW + 1, N_FRAMES + 1)
    (out / "rmse_per_frame.svg").write_text(line_chart(
        {n: (frames, c) for n, c in curves.items()}, "Rollout RMSE per frame", "frame", "RMSE (mm)"))
    outputs = ["rmse_per_frame.csv", "rmse_per_frame.svg"]
    if set(ckpts) == set(SEGMENT_NAMES):
        rec = recs[0]
        traj, _ = whole_body_rollout(ckpts, rec.markers(MARKER_NAMES)[:WINDOW], recording_meta(rec))
        measured = rec.markers(MARKER_NAMES)
        lines = ["frame,source,marker,x_mm,y_mm,z_mm"]
        for f in SNAPSHOT_FRAMES:
            for source, data in (("measured", measured), ("predicted", traj)):
                for m, marker in enumerate(MARKER_NAMES):
                    x, y, z = data[f - 1, m]
                    lines.append(f"{f},{source},{marker},{x!r},{y!r},{z!r}")
        (out / "snapshots.csv").write_text("\n".join(lines) + "\n")
        for source, data in (("measured", measured), ("predicted", traj)):
            svg = skeleton_snapshots({f"frame {f}": data[f - 1] for f in SNAPSHOT_FRAMES})
            (out / f"snapshots_{source}.svg").write_text(svg)
        outputs += ["snapshots.csv", "snapshots_measured.svg", "snapshots_predicted.svg"]
    else:
        log.warning("snapshots need all four segment checkpoints; skipped")
    return outputs


def cmd_loso(args, opts, out: Path) -> list[str]:
    recs = mio.read_dataset(args.data)
    _require_frames(recs)
    kind = opts["model"]
    result = loso(recs, kind, opts["segments"], train_config(opts, kind, opts["seed"]),
                  model_overrides(opts, kind), jobs=opts["jobs"], seed=opts["seed"])
    if not result.audit():
        raise ValueError("LOSO provenance audit failed: a held-out subject leaked into training")
    (out / "loso_rmse.csv").write_text(result.to_csv())
    folds = [{"test_subject": f.test_subject, "train_subjects": f.train_subjects,
              "val_subjects": f.val_subjects, "n_train_tasks": len(f.train_tasks)} for f in result.folds]
    (out / "loso_folds.json").write_text(json.dumps({"audit_passed": True, "folds": folds}, indent=2) + "\n")
    for name in result.aggregate():
        print(f"{name}: {format_mean_std([dict(f.report.rows())[name].rmse for f in result.folds])} mm")
    return ["loso_rmse.csv", "loso_folds.json"]


def cmd_ablate(args, opts, out: Path) -> list[str]:
    recs = mio.read_dataset(args.data)
    _require_frames(recs)
    train_recs, val_recs, test_recs = split_by_subject(recs, opts["seed"])
    cfg = train_config(opts, "transformer", opts["seed"], a=0.0)
    report = ablation_constraint_effect(train_recs, val_recs, test_recs, cfg,
                                        model_overrides(opts, "transformer"), seeds=tuple(opts["seeds"]),
                                        coefficients={"arms": opts["a_arms"], "legs": opts["a_legs"]},
                                        jobs=opts["jobs"])
    (out / "ablation_runs.csv").write_text(report.summary_csv())
    (out / "ablation_deltas.csv").write_text(report.deltas_csv())
    (out / "ablation_task_kl.csv").write_text(report.task_kl_csv())
    print(report.deltas_csv(), end="")
    return ["ablation_runs.csv", "ablation_deltas.csv", "ablation_task_kl.csv"]


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "rollout": cmd_rollout,
            "eval": cmd_eval, "report": cmd_report, "loso": cmd_loso, "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        opts = resolve(args)
        out: Path = args.out
        out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](args, opts, out)
        inputs = {k: getattr(args, k) for k in ("data", "checkpoint_dir", "task") if hasattr(args, k)}
        write_manifest(out, args.command, opts, inputs, outputs, started)
    except (TrainingDivergedError, RolloutError, NonFiniteGradientError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, mio.SchemaError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
