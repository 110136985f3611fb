from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .markers import MARKER_NAMES

LIFTING_CODES = {"upright": 0, "stoop": 1, "semi_squat": 2, "full_squat": 3}
HANDLING_CODES = {"one_handed": 1, "two_handed": 2}


@dataclass
class TaskRecording:
    """One load-reaching trial. ``frames`` is (F, n_markers, 3) in millimetres."""

    subject_id: str
    mass: float
    height: float
    lifting_technique: str
    handling_technique: str
    load_position: np.ndarray
    sample_rate: float
    frames: np.ndarray
    marker_names: tuple[str, ...] = MARKER_NAMES
    task_id: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.load_position = np.asarray(self.load_position, dtype=np.float64).reshape(3)
        self.marker_names = tuple(self.marker_names)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError(f"frames must be (F, markers, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 2:
            raise ValueError("a recording needs at least 2 frames")
        if self.frames.shape[1] != len(self.marker_names):
            raise ValueError(
                f"{self.frames.shape[1]} marker columns but {len(self.marker_names)} marker names")
        if len(set(self.marker_names)) != len(self.marker_names):
            raise ValueError("marker names must be unique")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"recording {self.task_id or self.subject_id} has non-finite coordinates")
        if self.lifting_technique not in LIFTING_CODES:
            raise ValueError(f"unknown lifting technique {self.lifting_technique!r}")
        if self.handling_technique not in HANDLING_CODES:
            raise ValueError(f"unknown handling technique {self.handling_technique!r}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def marker_index(self, name: str) -> int:
        try:
            return self.marker_names.index(name)
        except ValueError:
            raise KeyError(f"marker {name!r} missing from recording {self.task_id!r}") from None

    def markers(self, names) -> np.ndarray:
        """(F, len(names), 3) view of the named markers."""
        idx = [self.marker_index(n) for n in names]
        return self.frames[:, idx, :]

    def with_frames(self, frames: np.ndarray, sample_rate: float | None = None) -> "TaskRecording":
        return replace(self, frames=frames,
                       sample_rate=self.sample_rate if sample_rate is None else sample_rate)
