"""Error metrics, segment-length KL divergence, LOSO cross-validation and the
constraint ablation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as sps

from .models import BLSTM, BlstmConfig, Checkpoint, Transformer, TransformerConfig
from .motion.markers import SEGMENT_NAMES, get_segment
from .motion.preprocess import (WINDOW, make_windows, pair_lengths, recording_meta,
                                segment_frames)
from .motion.recording import TaskRecording
from .rollout import rollout_batch
from .training import BEST_COEFFICIENT, TrainConfig, train

log = logging.getLogger(__name__)

KL_BINS = 50
KL_SMOOTHING = 1e-10
KL_RESOLUTION = 1.0  # mm; narrowest histogram bin
EARLY_FRAMES = (26, 37)
LATE_FRAMES = (90, 101)


# -- metrics --------------------------------------------------------------------------


def rmse(y, y_hat) -> float:
    """Root of the mean squared error over every entry (samples x features x frames)."""
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def nrmse(y, y_hat, value_range: float | None = None) -> float:
    """RMSE as a percentage of the range of the measured values."""
    y = np.asarray(y, dtype=np.float64)
    if value_range is None:
        value_range = float(y.max() - y.min())
    if not value_range > 0:
        raise ValueError("nRMSE undefined: measured data has zero range")
    return 100.0 * rmse(y, y_hat) / value_range


def r_squared(y, y_hat) -> float:
    """1 - SS_res / SS_tot pooled over all entries, around the grand mean."""
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        raise ValueError("R² undefined: measured data has zero variance")
    return 1.0 - float(((y - y_hat) ** 2).sum()) / ss_tot


def kl_divergence(p, q) -> float:
    """sum p log(p / q) in nats for two probability vectors (zero p terms contribute 0)."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def histogram_edges(lo: float, hi: float, bins: int = KL_BINS, resolution: float = KL_RESOLUTION) -> np.ndarray:
    """Uniform edges over [lo, hi]: ``bins`` bins, or fewer bins of width ``resolution`` for narrow ranges.

    The narrow-range layout is centred on the data, so a spread far below the
    resolution (floating-point jitter of a rigid segment) falls in one bin.
    """
    span = hi - lo
    if span >= bins * resolution and span > 0:
        return np.linspace(lo, hi, bins + 1)
    if resolution <= 0:
        raise ValueError("a zero-width range needs a positive resolution")
    n = max(1, math.ceil(span / resolution))
    start = 0.5 * (lo + hi) - 0.5 * n * resolution
    return start + resolution * np.arange(n + 1)


def length_histograms(measured, predicted, bins: int = KL_BINS, eps: float = KL_SMOOTHING,
                      resolution: float = KL_RESOLUTION):
    """Smoothed, renormalised histograms on shared uniform edges over the pooled range."""
    measured = np.asarray(measured, dtype=np.float64).ravel()
    predicted = np.asarray(predicted, dtype=np.float64).ravel()
    if measured.size == 0 or predicted.size == 0:
        raise ValueError("KL needs non-empty measured and predicted samples")
    lo = min(measured.min(), predicted.min())
    hi = max(measured.max(), predicted.max())
    edges = histogram_edges(lo, hi, bins, resolution)
    p = np.histogram(measured, edges)[0] / measured.size + eps
    q = np.histogram(predicted, edges)[0] / predicted.size + eps
    return p / p.sum(), q / q.sum(), edges


def kl_segment_lengths(measured, predicted, bins: int = KL_BINS, eps: float = KL_SMOOTHING,
                       resolution: float = KL_RESOLUTION) -> float:
    """D_KL(P || Q) of measured (P) vs predicted (Q) segment-length distributions."""
    p, q, _ = length_histograms(measured, predicted, bins, eps, resolution)
    return kl_divergence(p, q)


# -- reports --------------------------------------------------------------------------


@dataclass
class SegmentMetrics:
    rmse: float
    nrmse: float
    r2: float
    kl: float | None = None


@dataclass
class MetricsReport:
    segments: dict[str, SegmentMetrics] = field(default_factory=dict)
    whole_body: SegmentMetrics | None = None
    label: str = ""

    def rows(self):
        for name, m in self.segments.items():
            yield name, m
        if self.whole_body is not None:
            yield "whole_body", self.whole_body

    def to_csv(self) -> str:
        lines = ["segment,rmse_mm,nrmse_pct,r2,kl_nats"]
        for name, m in self.rows():
            kl = "" if m.kl is None else repr(m.kl)
            lines.append(f"{name},{m.rmse!r},{m.nrmse!r},{m.r2!r},{kl}")
        return "\n".join(lines) + "\n"


def format_mean_std(values, digits: int = 1) -> str:
    values = np.asarray(values, dtype=np.float64)
    return f"{values.mean():.{digits}f} ± {values.std():.{digits}f}"


def aggregate(reports: list[MetricsReport], metric: str = "rmse") -> dict[str, tuple[float, float]]:
    """(mean, std) of one metric per segment row across folds."""
    names = [n for n, _ in reports[0].rows()]
    out = {}
    for name in names:
        vals = [getattr(dict(r.rows())[name], metric) for r in reports]
        out[name] = (float(np.mean(vals)), float(np.std(vals)))
    return out


# -- evaluation of trained models -----------------------------------------------------


def one_step_predictions(ckpt: Checkpoint, recordings: list[TaskRecording]):
    """(truth, prediction) arrays (n_windows, 3m) in mm for teacher-forced next-frame prediction."""
    seg = get_segment(ckpt.segment)
    X = np.concatenate([np.stack([w.X for w in make_windows(r, seg)]) for r in recordings])
    Y = np.concatenate([np.stack([w.y for w in make_windows(r, seg)]) for r in recordings])
    pred = ckpt.stats.denormalize_coords(ckpt.model(ckpt.stats.normalize(X)).data)
    return Y, pred


def rollout_predictions(model, recordings: list[TaskRecording], segment: str):
    """(truth, prediction) arrays (n_tasks, 76, 3m) in mm for recursive rollout."""
    seg = get_segment(segment)
    coords = np.stack([segment_frames(r, seg) for r in recordings])
    metas = np.stack([recording_meta(r) for r in recordings])
    pred = rollout_batch(model, coords[:, :WINDOW], metas)
    return coords[:, WINDOW:], pred


def per_frame_rmse(truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """RMSE per predicted frame pooled over tasks and coordinates, (76,)."""
    return np.sqrt(((truth - pred) ** 2).mean(axis=(0, 2)))


def frame_window_rmse(truth: np.ndarray, pred: np.ndarray, frames: tuple[int, int]) -> float:
    """Mean of per-frame RMSE over 1-based inclusive frame numbers (>= 26)."""
    curve = per_frame_rmse(truth, pred)
    lo, hi = frames[0] - WINDOW - 1, frames[1] - WINDOW
    return float(curve[lo:hi].mean())


def task_length_kl(truth: np.ndarray, pred: np.ndarray, segment: str, bins: int = KL_BINS) -> np.ndarray:
    """Per-task KL (mean over constraint pairs) of measured vs predicted pair lengths, (n_tasks,)."""
    pairs = get_segment(segment).pair_indices()
    lt = pair_lengths(truth, pairs)
    lp = pair_lengths(pred, pairs)
    out = np.empty(truth.shape[0])
    for i in range(truth.shape[0]):
        out[i] = np.mean([kl_segment_lengths(lt[i, :, j], lp[i, :, j], bins) for j in range(len(pairs))])
    return out


def segment_metrics(truth: np.ndarray, pred: np.ndarray, segment: str | None = None,
                    with_kl: bool = False) -> SegmentMetrics:
    kl = None
    if with_kl and segment is not None and get_segment(segment).constraint_pairs:
        kl = float(task_length_kl(truth, pred, segment).mean())
    return SegmentMetrics(rmse(truth, pred), nrmse(truth, pred), r_squared(truth, pred), kl)


def evaluate_rollouts(checkpoints: dict[str, Checkpoint], recordings: list[TaskRecording],
                      with_kl: bool = True, label: str = "") -> tuple[MetricsReport, dict]:
    """Long-horizon metrics per segment plus a whole-body row pooled over every coordinate."""
    report = MetricsReport(label=label)
    curves, truths, preds = {}, [], []
    for name in SEGMENT_NAMES:
        if name not in checkpoints:
            continue
        truth, pred = rollout_predictions(checkpoints[name], recordings, name)
        report.segments[name] = segment_metrics(truth, pred, name, with_kl)
        curves[name] = per_frame_rmse(truth, pred)
        truths.append(truth.reshape(-1))
        preds.append(pred.reshape(-1))
    if len(report.segments) > 1:
        t, p = np.concatenate(truths), np.concatenate(preds)
        report.whole_body = SegmentMetrics(rmse(t, p), nrmse(t, p), r_squared(t, p))
    return report, curves


# -- model / training helpers --------------------------------------------------------


def build_model(kind: str, segment: str, seed: int, overrides: dict | None = None):
    seg = get_segment(segment)
    overrides = dict(overrides or {})
    if kind == "blstm":
        return BLSTM.init(BlstmConfig(seg.n_features, 3 * seg.n_markers, **overrides), seed)
    if kind == "transformer":
        return Transformer.init(TransformerConfig(seg.n_features, 3 * seg.n_markers, **overrides), seed)
    raise ValueError(f"unknown model kind {kind!r}")


def windows_for(recordings: list[TaskRecording], segment: str):
    seg = get_segment(segment)
    return [w for r in recordings for w in make_windows(r, seg)]


def fit_segment(kind: str, segment: str, train_recs, val_recs, config: TrainConfig,
                model_overrides: dict | None = None):
    model = build_model(kind, segment, config.seed, model_overrides)
    return train(model, windows_for(train_recs, segment), windows_for(val_recs, segment), config,
                 get_segment(segment))


# -- leave-one-subject-out ------------------------------------------------------------


@dataclass
class FoldResult:
    test_subject: str
    train_subjects: list[str]
    val_subjects: list[str]
    train_tasks: list[str]
    report: MetricsReport


@dataclass
class LosoResult:
    folds: list[FoldResult]

    def aggregate(self, metric: str = "rmse") -> dict[str, tuple[float, float]]:
        return aggregate([f.report for f in self.folds], metric)

    def to_csv(self) -> str:
        names = [n for n, _ in self.folds[0].report.rows()]
        lines = ["fold," + ",".join(names)]
        for f in self.folds:
            rows = dict(f.report.rows())
            lines.append(f.test_subject + "," + ",".join(repr(rows[n].rmse) for n in names))
        lines.append("mean_std," + ",".join(format_mean_std([dict(f.report.rows())[n].rmse
                                                             for f in self.folds]) for n in names))
        return "\n".join(lines) + "\n"

    def audit(self) -> bool:
        """True when every fold's held-out subject never appears in its training or validation data."""
        for f in self.folds:
            if f.test_subject in f.train_subjects or f.test_subject in f.val_subjects:
                return False
            if any(t.split("_")[0] == f.test_subject for t in f.train_tasks):
                return False
        return True


def loso_folds(recordings: list[TaskRecording], seed: int = 0):
    """Yield (test subject, train recs, val recs, test recs); validation subjects come from the rest."""
    # a canonical task order keeps every fold independent of the input ordering
    recordings = sorted(recordings, key=lambda r: (r.subject_id, r.task_id))
    subjects = sorted({r.subject_id for r in recordings})
    if len(subjects) < 2:
        raise ValueError("LOSO needs at least 2 subjects")
    for k, held in enumerate(subjects):
        rest = [s for s in subjects if s != held]
        rng = np.random.default_rng([seed, k])
        n_val = max(1, math.floor(0.2 * len(rest) + 0.5)) if len(rest) > 1 else 0
        val_subj = set(rng.choice(rest, size=n_val, replace=False).tolist()) if n_val else set()
        train_subj = [s for s in rest if s not in val_subj]
        train_recs = [r for r in recordings if r.subject_id in train_subj]
        # a single remaining subject doubles as its own validation set
        val_recs = [r for r in recordings if r.subject_id in val_subj] or train_recs
        test_recs = [r for r in recordings if r.subject_id == held]
        yield held, train_recs, val_recs, test_recs


def _run_fold(args):
    held, train_recs, val_recs, test_recs, kind, segments, config, overrides = args
    ckpts = {s: fit_segment(kind, s, train_recs, val_recs, config, overrides)[0] for s in segments}
    report, _ = evaluate_rollouts(ckpts, test_recs, with_kl=False, label=held)
    return FoldResult(held, sorted({r.subject_id for r in train_recs}),
                      sorted({r.subject_id for r in val_recs} - {r.subject_id for r in train_recs}),
                      [r.task_id for r in train_recs], report)


def loso(recordings: list[TaskRecording], kind: str = "transformer", segments=SEGMENT_NAMES,
         config: TrainConfig | None = None, model_overrides: dict | None = None,
         jobs: int = 1, seed: int = 0) -> LosoResult:
    config = config or TrainConfig.for_model(kind)
    tasks = [(held, tr, va, te, kind, tuple(segments), config, model_overrides)
             for held, tr, va, te in loso_folds(recordings, seed)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            folds = list(pool.map(_run_fold, tasks))
    else:
        folds = [_run_fold(t) for t in tasks]
    return LosoResult(folds)


# -- constraint ablation --------------------------------------------------------------


@dataclass
class AblationRun:
    segment: str
    a: float
    seed: int
    rmse: float
    kl: float
    early_rmse: float
    late_rmse: float
    task_kl: np.ndarray
    task_ids: list[str]
    history_len: int


@dataclass
class AblationReport:
    runs: list[AblationRun]

    def get(self, segment: str, constrained: bool, seed: int) -> AblationRun:
        for r in self.runs:
            if r.segment == segment and r.seed == seed and (r.a > 0) == constrained:
                return r
        raise KeyError((segment, constrained, seed))

    @property
    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.runs})

    @property
    def segments(self) -> list[str]:
        return sorted({r.segment for r in self.runs}, key=SEGMENT_NAMES.index)

    def wilcoxon(self, segment: str, seed: int) -> float:
        """Two-sided paired signed-rank p-value of per-task KL, unconstrained vs constrained."""
        base = self.get(segment, False, seed).task_kl
        kin = self.get(segment, True, seed).task_kl
        if np.allclose(base, kin):
            return 1.0
        return float(sps.wilcoxon(base, kin, alternative="two-sided").pvalue)

    def summary_csv(self) -> str:
        lines = ["segment,seed,a,rmse_mm,kl_nats,rmse_frames_26_37,rmse_frames_90_101"]
        for r in self.runs:
            lines.append(f"{r.segment},{r.seed},{r.a!r},{r.rmse!r},{r.kl!r},{r.early_rmse!r},{r.late_rmse!r}")
        return "\n".join(lines) + "\n"

    def deltas_csv(self) -> str:
        lines = ["segment,seed,rmse_mse_only,rmse_constrained,delta_rmse,kl_mse_only,kl_constrained,"
                 "delta_kl,wilcoxon_p"]
        for seg in self.segments:
            for seed in self.seeds:
                b, k = self.get(seg, False, seed), self.get(seg, True, seed)
                lines.append(f"{seg},{seed},{b.rmse!r},{k.rmse!r},{k.rmse - b.rmse!r},{b.kl!r},{k.kl!r},"
                             f"{k.kl - b.kl!r},{self.wilcoxon(seg, seed)!r}")
        return "\n".join(lines) + "\n"

    def task_kl_csv(self) -> str:
        lines = ["segment,seed,task_id,kl_mse_only,kl_constrained"]
        for seg in self.segments:
            for seed in self.seeds:
                b, k = self.get(seg, False, seed), self.get(seg, True, seed)
                for tid, x, y in zip(b.task_ids, b.task_kl, k.task_kl):
                    lines.append(f"{seg},{seed},{tid},{x!r},{y!r}")
        return "\n".join(lines) + "\n"


def _run_ablation(args) -> AblationRun:
    segment, a, seed, train_recs, val_recs, test_recs, config, overrides = args
    cfg = replace(config, a=a, seed=seed)
    ckpt, hist = fit_segment("transformer", segment, train_recs, val_recs, cfg, overrides)
    truth, pred = rollout_predictions(ckpt, test_recs, segment)
    task_kl = task_length_kl(truth, pred, segment)
    return AblationRun(segment, a, seed, rmse(truth, pred), float(task_kl.mean()),
                       frame_window_rmse(truth, pred, EARLY_FRAMES), frame_window_rmse(truth, pred, LATE_FRAMES),
                       task_kl, [r.task_id for r in test_recs], len(hist.epoch))


def ablation_constraint_effect(train_recs, val_recs, test_recs, config: TrainConfig | None = None,
                               model_overrides: dict | None = None, seeds=(0,),
                               coefficients: dict[str, float] | None = None, jobs: int = 1) -> AblationReport:
    """Train a=0 and a>0 transformer twins per segment and seed; compare rollout RMSE and length KL."""
    config = config or TrainConfig.for_model("transformer")
    coefficients = coefficients or dict(BEST_COEFFICIENT)
    tasks = []
    for seg, a in coefficients.items():
        if not get_segment(seg).constraint_pairs:
            raise ValueError(f"segment {seg} has no constraint pairs to ablate")
        for seed in seeds:
            for coef in (0.0, a):
                tasks.append((seg, coef, seed, train_recs, val_recs, test_recs, config, model_overrides))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            runs = list(pool.map(_run_ablation, tasks))
    else:
        runs = [_run_ablation(t) for t in tasks]
    return AblationReport(runs)

