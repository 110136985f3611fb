"""One-step prediction and recursive long-horizon rollout.

A *predictor* is any callable mapping raw windows ``(B, 25, 3m + 7)`` in mm to
next frames ``(B, 3m)`` in mm. :func:`checkpoint_predictor` wraps a trained
checkpoint: it normalises with the checkpoint statistics, runs the model in
eval mode and denormalises the output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .models import Checkpoint
from .motion.markers import MARKER_NAMES, SEGMENT_NAMES, get_segment
from .motion.preprocess import N_FRAMES, N_META, WINDOW

Predictor = Callable[[np.ndarray], np.ndarray]
N_PREDICTED = N_FRAMES - WINDOW


class RolloutError(FloatingPointError):
    pass


def checkpoint_predictor(ckpt: Checkpoint) -> Predictor:
    def predict(windows: np.ndarray) -> np.ndarray:
        Xn = ckpt.stats.normalize(windows)
        return ckpt.stats.denormalize_coords(ckpt.model(Xn).data)

    return predict


def copy_last_frame(windows: np.ndarray) -> np.ndarray:
    """Identity baseline: repeat the newest frame's coordinates."""
    return windows[:, -1, : windows.shape[-1] - N_META].copy()


def _as_predictor(model) -> Predictor:
    return checkpoint_predictor(model) if isinstance(model, Checkpoint) else model


def predict_next(model, window: np.ndarray) -> np.ndarray:
    """Next frame (3m,) in mm from one raw (25, f) window."""
    return _as_predictor(model)(np.asarray(window, dtype=np.float64)[None])[0]


@dataclass
class RolloutResult:
    seed: np.ndarray        # (25, 3m) measured frames
    predicted: np.ndarray   # (76, 3m) frames 26..101

    @property
    def trajectory(self) -> np.ndarray:
        return np.concatenate([self.seed, self.predicted], axis=0)

    @property
    def provenance(self) -> list[str]:
        return ["measured"] * len(self.seed) + ["predicted"] * len(self.predicted)


def rollout_batch(model, seeds: np.ndarray, metas: np.ndarray, steps: int = N_PREDICTED) -> np.ndarray:
    """Recursive rollout for many tasks at once: seeds (N, 25, 3m), metas (N, 7) -> (N, steps, 3m)."""
    predictor = _as_predictor(model)
    seeds = np.asarray(seeds, dtype=np.float64)
    metas = np.asarray(metas, dtype=np.float64)
    if seeds.ndim != 3 or seeds.shape[1] != WINDOW:
        raise ValueError(f"seed frames must be (N, {WINDOW}, 3m), got {seeds.shape}")
    N, _, k = seeds.shape
    meta_rows = np.broadcast_to(metas[:, None, :], (N, WINDOW, N_META))
    coords = seeds.copy()
    out = np.empty((N, steps, k))
    for step in range(steps):
        window = np.concatenate([coords, meta_rows], axis=-1)
        nxt = predictor(window)
        if not np.all(np.isfinite(nxt)):
            raise RolloutError(f"non-finite prediction at rollout step {step + 1} (frame {WINDOW + step + 1})")
        out[:, step] = nxt
        coords = np.concatenate([coords[:, 1:], nxt[:, None, :]], axis=1)
    return out


def rollout(model, first_frames: np.ndarray, meta: np.ndarray) -> RolloutResult:
    """Frames 26..101 from 25 seed frames (25, 3m) mm and the 7 task features."""
    first_frames = np.asarray(first_frames, dtype=np.float64)
    pred = rollout_batch(model, first_frames[None], np.asarray(meta)[None])[0]
    return RolloutResult(first_frames.copy(), pred)


def whole_body_rollout(models: Mapping[str, object], seed_frames: np.ndarray,
                       meta: np.ndarray) -> tuple[np.ndarray, list[str]]:
    """Run the four segment models independently and assemble a (101, 41, 3) trajectory."""
    missing = [s for s in SEGMENT_NAMES if s not in models]
    if missing:
        raise KeyError(f"no checkpoint for segment(s): {', '.join(missing)}")
    seed_frames = np.asarray(seed_frames, dtype=np.float64)
    out = np.full((N_FRAMES, len(MARKER_NAMES), 3), np.nan)
    out[:WINDOW] = seed_frames
    for name in SEGMENT_NAMES:
        seg = get_segment(name)
        idx = [MARKER_NAMES.index(m) for m in seg.member_markers]
        seeds = seed_frames[:, idx, :].reshape(WINDOW, -1)
        res = rollout(models[name], seeds, meta)
        out[WINDOW:, idx, :] = res.predicted.reshape(N_PREDICTED, len(idx), 3)
    provenance = ["measured"] * WINDOW + ["predicted"] * N_PREDICTED
    return out, provenance


def segment_of(trajectory: np.ndarray, segment: str) -> np.ndarray:
    """(F, 3m) coordinates of one segment from a (F, 41, 3) trajectory."""
    seg = get_segment(segment)
    idx = [MARKER_NAMES.index(m) for m in seg.member_markers]
    return trajectory[:, idx, :].reshape(trajectory.shape[0], -1)
