"""Filtering, resampling, feature encoding, windowing, normalisation and
subject-level splitting of task recordings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .markers import N_META, SegmentSpec
from .recording import HANDLING_CODES, LIFTING_CODES, TaskRecording

N_FRAMES = 101
WINDOW = 25
STD_FLOOR = 1e-8


def butterworth_zero_lag(series: np.ndarray, fs: float = 120.0, fc: float = 10.0,
                         order: int = 4, axis: int = 0) -> np.ndarray:
    """Forward-backward low-pass Butterworth filter along ``axis``.

    The two passes square the magnitude response and cancel the phase. Edges
    are padded by odd reflection over ``3 * (order + 1)`` samples.
    """
    series = np.asarray(series, dtype=np.float64)
    padlen = 3 * (order + 1)
    n = series.shape[axis]
    if n <= padlen:
        raise ValueError(f"series of length {n} too short to filter: need more than {padlen} samples")
    if not 0 < fc < fs / 2:
        raise ValueError(f"cut-off {fc} Hz must lie in (0, {fs / 2}) for fs={fs} Hz")
    b, a = signal.butter(order, fc, btype="low", fs=fs)
    return signal.filtfilt(b, a, series, axis=axis, padtype="odd", padlen=padlen)


def filter_task(rec: TaskRecording, fc: float = 10.0, order: int = 4) -> TaskRecording:
    return rec.with_frames(butterworth_zero_lag(rec.frames, rec.sample_rate, fc, order, axis=0))


def resample_task(rec: TaskRecording, n: int = N_FRAMES) -> TaskRecording:
    """Linear interpolation onto ``n`` frames spanning the original duration."""
    F = rec.n_frames
    if F < 2:
        raise ValueError("resampling needs at least 2 frames")
    if F == n:
        return rec.with_frames(rec.frames.copy())
    src = np.arange(F, dtype=np.float64)
    dst = np.linspace(0.0, F - 1.0, n)
    flat = rec.frames.reshape(F, -1)
    out = np.empty((n, flat.shape[1]))
    for j in range(flat.shape[1]):
        out[:, j] = np.interp(dst, src, flat[:, j])
    # endpoints exactly
    out[0], out[-1] = flat[0], flat[-1]
    duration = (F - 1) / rec.sample_rate
    return rec.with_frames(out.reshape(n, *rec.frames.shape[1:]), sample_rate=(n - 1) / duration)


def preprocess_task(rec: TaskRecording, filter_signal: bool = True, fc: float = 10.0,
                    order: int = 4, n: int = N_FRAMES) -> TaskRecording:
    if filter_signal:
        rec = filter_task(rec, fc, order)
    return resample_task(rec, n)


def encode_task_meta(lifting_technique: str, handling_technique: str, load_position,
                     height_cm: float, mass_kg: float) -> np.ndarray:
    """[load_x, load_y, load_z, handling_code, lifting_code, height_cm, mass_kg]."""
    if lifting_technique not in LIFTING_CODES:
        raise ValueError(f"unknown lifting technique {lifting_technique!r}")
    if handling_technique not in HANDLING_CODES:
        raise ValueError(f"unknown handling technique {handling_technique!r}")
    x, y, z = np.asarray(load_position, dtype=np.float64).reshape(3)
    return np.array([x, y, z, HANDLING_CODES[handling_technique],
                     LIFTING_CODES[lifting_technique], height_cm, mass_kg], dtype=np.float64)


def recording_meta(rec: TaskRecording) -> np.ndarray:
    return encode_task_meta(rec.lifting_technique, rec.handling_technique, rec.load_position,
                            rec.height, rec.mass)


@dataclass
class WindowSample:
    X: np.ndarray          # (WINDOW, 3m + 7)
    y: np.ndarray          # (3m,)
    task_id: str
    subject_id: str
    start: int             # 0-based first frame of the window
    ref_lengths: np.ndarray  # reference constraint-pair lengths, mm


def segment_frames(rec: TaskRecording, seg: SegmentSpec) -> np.ndarray:
    """(F, 3m) segment coordinates, marker-major (x, y, z per marker)."""
    missing = [m for m in seg.member_markers if m not in rec.marker_names]
    if missing:
        raise KeyError(f"recording {rec.task_id!r} lacks segment {seg.name} marker(s): {', '.join(missing)}")
    return rec.markers(seg.member_markers).reshape(rec.n_frames, -1)


def pair_lengths(coords: np.ndarray, pairs) -> np.ndarray:
    """Euclidean pair distances for (..., 3m) coordinates -> (..., n_pairs)."""
    pts = coords.reshape(*coords.shape[:-1], -1, 3)
    if not pairs:
        return np.zeros(coords.shape[:-1] + (0,))
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    return np.linalg.norm(pts[..., a, :] - pts[..., b, :], axis=-1)


def reference_lengths(coords: np.ndarray, seg: SegmentSpec, n_seed: int = WINDOW) -> np.ndarray:
    """Mean constraint-pair length over the first ``n_seed`` frames of a task."""
    return pair_lengths(coords[:n_seed], seg.pair_indices()).mean(axis=0)


def make_windows(rec: TaskRecording, seg: SegmentSpec, window: int = WINDOW) -> list[WindowSample]:
    if rec.n_frames != N_FRAMES:
        raise ValueError(f"windowing expects {N_FRAMES} frames, recording {rec.task_id!r} has {rec.n_frames}")
    coords = segment_frames(rec, seg)
    meta = recording_meta(rec)
    meta_rows = np.broadcast_to(meta, (window, N_META))
    refs = reference_lengths(coords, seg, window)
    out = []
    for k in range(rec.n_frames - window):
        X = np.concatenate([coords[k:k + window], meta_rows], axis=1)
        out.append(WindowSample(X, coords[k + window].copy(), rec.task_id, rec.subject_id, k, refs))
    return out


def stack_windows(samples: list[WindowSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays (X, Y, reference lengths) from window samples."""
    X = np.stack([s.X for s in samples])
    Y = np.stack([s.y for s in samples])
    R = np.stack([s.ref_lengths for s in samples])
    return X, Y, R


@dataclass
class NormalizerStats:
    mean: np.ndarray
    std: np.ndarray

    @property
    def divisor(self) -> np.ndarray:
        return np.where(self.std < STD_FLOOR, 1.0, self.std)

    def normalize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.divisor

    def denormalize(self, Xn: np.ndarray) -> np.ndarray:
        return Xn * self.divisor + self.mean

    def normalize_coords(self, y: np.ndarray) -> np.ndarray:
        """Labels and decoder tokens share the statistics of the coordinate features."""
        k = y.shape[-1]
        return (y - self.mean[:k]) / self.divisor[:k]

    def denormalize_coords(self, yn: np.ndarray) -> np.ndarray:
        k = yn.shape[-1]
        return yn * self.divisor[:k] + self.mean[:k]


def fit_normalizer(samples) -> NormalizerStats:
    """Per-feature mean and population std over every row of the training windows."""
    if isinstance(samples, np.ndarray):
        X = samples
    else:
        X = np.stack([s.X for s in samples])
    if X.shape[0] == 0:
        raise ValueError("cannot fit a normalizer on an empty training set")
    rows = X.reshape(-1, X.shape[-1])
    return NormalizerStats(rows.mean(axis=0), rows.std(axis=0))


def normalize(X: np.ndarray, stats: NormalizerStats) -> np.ndarray:
    return stats.normalize(X)


def denormalize(y_normal: np.ndarray, stats: NormalizerStats) -> np.ndarray:
    return stats.denormalize_coords(y_normal)


def split_sizes(n_subjects: int) -> tuple[int, int, int]:
    if n_subjects < 3:
        raise ValueError(f"need at least 3 subjects to split, got {n_subjects}")
    n_val = max(1, math.floor(0.2 * n_subjects + 0.5))
    n_test = max(1, math.floor(0.1 * n_subjects + 0.5))
    return n_subjects - n_val - n_test, n_val, n_test


def split_by_subject(recordings: list[TaskRecording], seed: int = 0):
    """Subject-disjoint (train, val, test) lists of recordings."""
    subjects = sorted({r.subject_id for r in recordings})
    n_train, n_val, _ = split_sizes(len(subjects))
    order = np.random.default_rng(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    groups = (set(shuffled[:n_train]), set(shuffled[n_train:n_train + n_val]),
              set(shuffled[n_train + n_val:]))
    return tuple([r for r in recordings if r.subject_id in g] for g in groups)
