"""Synthetic load-reaching trials from a rigid stick skeleton.

Every marker is fixed in the frame of one bone, so any two markers on the
same bone keep their distance exactly. Joint angles follow minimum-jerk
profiles from upright standing (all angles zero) to a reaching posture found
by inverse kinematics, so the last frame puts the hand(s) on the load.

World axes: x to the subject's right, y forward, z up; origin at the heel
midpoint on the floor; millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .markers import MARKER_NAMES
from .preprocess import N_FRAMES
from .recording import HANDLING_CODES, LIFTING_CODES, TaskRecording

REACH_TOLERANCE_MM = 20.0
HAND_SPAN_MM = 250.0

# q layout
DOF = ("ankle", "knee", "pelvis_tilt", "trunk_flex", "trunk_rot", "trunk_bend",
       "r_sh_flex", "r_sh_abd", "r_elbow", "l_sh_flex", "l_sh_abd", "l_elbow")
N_DOF = len(DOF)

_COMMON = {"trunk_rot": (-1.3, 1.3), "trunk_bend": (-0.45, 0.45),
           "r_sh_flex": (-0.5, 2.9), "r_sh_abd": (-0.2, 1.6), "r_elbow": (0.0, 2.3),
           "l_sh_flex": (-0.5, 2.9), "l_sh_abd": (-0.2, 1.6), "l_elbow": (0.0, 2.3)}
_TECHNIQUE_BOUNDS = {
    "upright": {"ankle": (0.0, 0.0), "knee": (0.0, 0.0), "pelvis_tilt": (-0.1, 0.25),
                "trunk_flex": (-0.15, 0.3)},
    "stoop": {"ankle": (0.0, 0.25), "knee": (0.0, 0.5), "pelvis_tilt": (0.0, 1.3),
              "trunk_flex": (0.0, 0.9)},
    "semi_squat": {"ankle": (0.2, 0.5), "knee": (0.6, 1.3), "pelvis_tilt": (0.2, 1.2),
                   "trunk_flex": (0.0, 0.8)},
    "full_squat": {"ankle": (0.3, 0.7), "knee": (1.6, 2.3), "pelvis_tilt": (0.2, 1.0),
                   "trunk_flex": (0.0, 0.7)},
}

# task grid of load positions in cm: (x, y) horizontal from heel midpoint, z above floor
_ONE_HANDED_XY = [(30, 0), (45, 0), (60, 0), (30, 30), (45, 45), (60, 60), (0, 30), (0, 45), (0, 60),
                  (-30, 30), (-45, 45), (-60, 60), (-30, 0), (-45, 0), (-60, 0)]
_TWO_HANDED_XY = _ONE_HANDED_XY[:9]
_HEIGHTS = [0, 30, 60, 90, 120, 150, 180]


@dataclass(frozen=True)
class TaskSpec:
    lifting_technique: str
    handling_technique: str
    load_position: tuple[float, float, float]   # mm

    def __post_init__(self):
        if self.lifting_technique not in LIFTING_CODES:
            raise ValueError(f"unknown lifting technique {self.lifting_technique!r}")
        if self.handling_technique not in HANDLING_CODES:
            raise ValueError(f"unknown handling technique {self.handling_technique!r}")


def task_grid() -> list[TaskSpec]:
    """The 204 unloaded tasks: 105 one-handed and 99 two-handed."""
    tasks = []
    for hand, xys in (("one_handed", _ONE_HANDED_XY), ("two_handed", _TWO_HANDED_XY)):
        for x, y in xys:
            for z in _HEIGHTS:
                lt = "upright" if z >= 90 else "stoop"
                tasks.append(TaskSpec(lt, hand, (10.0 * x, 10.0 * y, 10.0 * z)))
    for lt in ("semi_squat", "full_squat"):
        for x, y in _TWO_HANDED_XY:
            for z in (0, 30):
                tasks.append(TaskSpec(lt, "two_handed", (10.0 * x, 10.0 * y, 10.0 * z)))
    return tasks


@dataclass(frozen=True)
class Skeleton:
    """Bone lengths and marker offsets scaled from stature (anthropometric ratios)."""

    height_mm: float = 1778.0
    mass_kg: float = 73.7

    def __post_init__(self):
        if self.height_mm <= 0:
            raise ValueError("skeleton height must be positive")

    def _h(self, r: float) -> float:
        return r * self.height_mm

    @property
    def ankle_height(self):
        return self._h(0.039)

    @property
    def shank(self):
        return self._h(0.246)

    @property
    def thigh(self):
        return self._h(0.245)

    @property
    def upper_arm(self):
        return self._h(0.186)

    @property
    def forearm(self):
        return self._h(0.146)

    @property
    def hand(self):
        return self._h(0.08)

    @property
    def hip_half_width(self):
        return self._h(0.055)

    @property
    def lumbar_offset(self):
        return self._h(0.08)

    @property
    def shoulder_offset(self):
        return np.array([self._h(0.13), 0.0, self._h(0.208)])

    @property
    def segment_lengths(self) -> dict[str, float]:
        return {"shank": self.shank, "thigh": self.thigh, "upper_arm": self.upper_arm,
                "forearm": self.forearm}


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _bend_forward(a):
    # tips an upward-pointing vector toward +y
    return _rx(-a)


def _trunk(q, sk: Skeleton):
    """Pelvis origin/rotation and trunk origin/rotation for posture q."""
    a, k, p, t, rot, bend = q[:6]
    shank_dir = np.array([0.0, np.sin(a), np.cos(a)])
    thigh_dir = np.array([0.0, np.sin(a - k), np.cos(a - k)])
    pelvis = np.array([0.0, 0.0, sk.ankle_height]) + sk.shank * shank_dir + sk.thigh * thigh_dir
    R_pelvis = _bend_forward(p)
    lumbar = pelvis + R_pelvis @ np.array([0.0, 0.0, sk.lumbar_offset])
    R_trunk = _rz(-rot) @ R_pelvis @ _bend_forward(t) @ _ry(bend)
    return pelvis, R_pelvis, lumbar, R_trunk


def _arm(q, sk: Skeleton, side: int, lumbar, R_trunk):
    """Shoulder centre, upper-arm and forearm rotations for side +1 (right) / -1 (left)."""
    f, abd, e = (q[6:9] if side > 0 else q[9:12])
    sh = sk.shoulder_offset * np.array([side, 1.0, 1.0])
    shoulder = lumbar + R_trunk @ sh
    R_upper = R_trunk @ _ry(-side * abd) @ _rx(f)
    elbow = shoulder + R_upper @ np.array([0.0, 0.0, -sk.upper_arm])
    R_fore = R_upper @ _rx(e)
    return shoulder, R_upper, elbow, R_fore


def hand_positions(q, sk: Skeleton) -> tuple[np.ndarray, np.ndarray]:
    """Right and left finger-marker positions."""
    _, _, lumbar, R_trunk = _trunk(q, sk)
    out = []
    for side in (1, -1):
        _, _, elbow, R_fore = _arm(q, sk, side, lumbar, R_trunk)
        out.append(elbow + R_fore @ np.array([0.0, 0.0, -(sk.forearm + sk.hand)]))
    return out[0], out[1]


def forward_kinematics(q, sk: Skeleton) -> np.ndarray:
    """(41, 3) marker positions in ``MARKER_NAMES`` order."""
    H = sk.height_mm
    a, k = q[0], q[1]
    pelvis, R_pelvis, lumbar, R_trunk = _trunk(q, sk)
    R_shank = _bend_forward(a)
    R_thigh = _bend_forward(a - k)
    m: dict[str, np.ndarray] = {}

    for side, pre in ((1, "R"), (-1, "L")):
        ankle = np.array([side * sk.hip_half_width, 0.0, sk.ankle_height])
        knee = ankle + R_shank @ np.array([0.0, 0.0, sk.shank])
        m[pre + "ANK"] = ankle + R_shank @ np.array([side * 0.02 * H, 0.0, 0.0])
        m[pre + "KNE"] = ankle + R_shank @ np.array([side * 0.02 * H, 0.0, sk.shank])
        m[pre + "TIB"] = ankle + R_shank @ np.array([side * 0.025 * H, 0.01 * H, 0.5 * sk.shank])
        m[pre + "THI"] = knee + R_thigh @ np.array([side * 0.03 * H, 0.01 * H, 0.5 * sk.thigh])
        m[pre + "HEE"] = np.array([side * sk.hip_half_width, -0.035 * H, 0.02 * H])
        m[pre + "TOE"] = np.array([side * (sk.hip_half_width + 0.01 * H), 0.11 * H, 0.01 * H])

        m[pre + "ASI"] = pelvis + R_pelvis @ np.array([side * 0.07 * H, 0.05 * H, 0.05 * H])
        m[pre + "PSI"] = pelvis + R_pelvis @ np.array([side * 0.03 * H, -0.06 * H, 0.06 * H])

        shoulder, R_upper, elbow, R_fore = _arm(q, sk, side, lumbar, R_trunk)
        m[pre + "SHO"] = shoulder + R_upper @ np.array([0.0, 0.0, 0.025 * H])
        m[pre + "UPA"] = shoulder + R_upper @ np.array([side * 0.03 * H, 0.0, -0.5 * sk.upper_arm])
        m[pre + "ELB"] = elbow
        m[pre + "FRM"] = elbow + R_fore @ np.array([side * 0.025 * H, 0.0, -0.5 * sk.forearm])
        m[pre + "WRA"] = elbow + R_fore @ np.array([0.0, 0.02 * H, -sk.forearm])
        m[pre + "WRB"] = elbow + R_fore @ np.array([0.0, -0.02 * H, -sk.forearm])
        m[pre + "FIN"] = elbow + R_fore @ np.array([0.0, 0.0, -(sk.forearm + sk.hand)])

    m["S1"] = pelvis + R_pelvis @ np.array([0.0, -0.07 * H, 0.04 * H])
    for name, off in (("T12", (0.0, -0.07, 0.05)), ("T10", (0.0, -0.075, 0.09)),
                      ("C7", (0.0, -0.06, 0.22)), ("CLAV", (0.0, 0.05, 0.205)),
                      ("STRN", (0.0, 0.07, 0.14)), ("RBAK", (0.05, -0.08, 0.15))):
        m[name] = lumbar + R_trunk @ (np.array(off) * H)

    neck = lumbar + R_trunk @ np.array([0.0, 0.0, 0.23 * H])
    R_head = R_trunk @ _bend_forward(-0.35 * (q[2] + q[3]))
    for name, off in (("LFHD", (-0.04, 0.05, 0.11)), ("RFHD", (0.04, 0.05, 0.11)),
                      ("LBHD", (-0.04, -0.05, 0.10)), ("RBHD", (0.04, -0.05, 0.10))):
        m[name] = neck + R_head @ (np.array(off) * H)

    return np.stack([m[n] for n in MARKER_NAMES])


class UnreachableTaskError(ValueError):
    def __init__(self, deficit_mm: float, task: TaskSpec):
        self.deficit_mm = deficit_mm
        super().__init__(
            f"load at {tuple(round(c, 1) for c in task.load_position)} mm unreachable with "
            f"{task.lifting_technique}/{task.handling_technique}: reach deficit {deficit_mm:.1f} mm")


def _bounds(task: TaskSpec) -> list[tuple[float, float]]:
    spec = {**_COMMON, **_TECHNIQUE_BOUNDS[task.lifting_technique]}
    if task.handling_technique == "one_handed":
        # idle left arm hangs
        spec.update({"l_sh_flex": (0.0, 0.0), "l_sh_abd": (0.0, 0.0), "l_elbow": (0.0, 0.0)})
    return [spec[d] for d in DOF]


def _reach_error(q, sk: Skeleton, task: TaskSpec) -> tuple[float, float]:
    """(distance of the hand point to the load, hand-span penalty) in mm."""
    target = np.asarray(task.load_position, dtype=np.float64)
    right, left = hand_positions(q, sk)
    if task.handling_technique == "one_handed":
        return float(np.linalg.norm(right - target)), 0.0
    mid = 0.5 * (right + left)
    return float(np.linalg.norm(mid - target)), abs(float(np.linalg.norm(right - left)) - HAND_SPAN_MM)


def solve_posture(sk: Skeleton, task: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Final joint angles putting the hand point on the load, or raise UnreachableTaskError."""
    bounds = _bounds(task)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    prior_w = rng.uniform(0.5, 1.5, N_DOF)

    def objective(q, reg):
        dist, span = _reach_error(q, sk, task)
        return dist * dist + 0.25 * span * span + reg * float(np.sum(prior_w * q * q))

    best = None
    for reg in (2000.0, 200.0, 5.0, 0.0):
        for _ in range(4):
            q0 = lo + (hi - lo) * rng.uniform(0.2, 0.8, N_DOF)
            res = minimize(objective, q0, args=(reg,), method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": 500})
            q = np.clip(res.x, lo, hi)
            dist, span = _reach_error(q, sk, task)
            if best is None or dist < best[1]:
                best = (q, dist)
            if dist <= 0.5 * REACH_TOLERANCE_MM and span <= 0.5 * HAND_SPAN_MM:
                return q
    q, dist = best
    if dist > REACH_TOLERANCE_MM:
        raise UnreachableTaskError(dist - REACH_TOLERANCE_MM, task)
    return q


def minimum_jerk(tau: np.ndarray) -> np.ndarray:
    tau = np.clip(tau, 0.0, 1.0)
    return tau ** 3 * (10.0 - 15.0 * tau + 6.0 * tau * tau)


def joint_trajectory(q_final: np.ndarray, n_frames: int, delays: np.ndarray) -> np.ndarray:
    """(n_frames, N_DOF) minimum-jerk profiles from zero to ``q_final``; joint j starts at phase delays[j]."""
    tau = np.linspace(0.0, 1.0, n_frames)[:, None]
    local = (tau - delays[None, :]) / (1.0 - delays[None, :])
    return minimum_jerk(local) * q_final[None, :]


def synthesize_task(skeleton: Skeleton, task: TaskSpec, seed: int, subject_id: str = "S00",
                    task_id: str = "", n_frames: int = N_FRAMES) -> TaskRecording:
    rng = np.random.default_rng(seed)
    q_final = solve_posture(skeleton, task, rng)
    delays = rng.uniform(0.0, 0.15, N_DOF)
    duration = rng.uniform(1.2, 2.2)
    qs = joint_trajectory(q_final, n_frames, delays)
    frames = np.stack([forward_kinematics(q, skeleton) for q in qs])
    return TaskRecording(
        subject_id=subject_id, mass=skeleton.mass_kg, height=skeleton.height_mm / 10.0,
        lifting_technique=task.lifting_technique, handling_technique=task.handling_technique,
        load_position=np.array(task.load_position, dtype=np.float64),
        sample_rate=(n_frames - 1) / duration, frames=frames, task_id=task_id,
        extra={"q_final": q_final},
    )


def sample_subject(rng: np.random.Generator, index: int) -> tuple[str, Skeleton]:
    height = float(np.clip(rng.normal(1778.0, 42.0), 1650.0, 1900.0))
    mass = float(rng.uniform(60.0, 90.0))
    return f"S{index + 1:02d}", Skeleton(height, mass)


def synthesize_dataset(n_subjects: int, tasks_per_subject: int, seed: int) -> list[TaskRecording]:
    """Tasks drawn from the load-position grid per subject, skipping postures the skeleton cannot reach."""
    if n_subjects < 1 or tasks_per_subject < 1:
        raise ValueError("need at least one subject and one task per subject")
    grid = task_grid()
    root = np.random.default_rng(seed)
    recordings = []
    for s in range(n_subjects):
        sid, sk = sample_subject(root, s)
        order = root.permutation(len(grid))
        made = 0
        for gi in order:
            if made == tasks_per_subject:
                break
            tid = f"{sid}_T{made + 1:03d}"
            try:
                rec = synthesize_task(sk, grid[gi], int(root.integers(2**31)), sid, tid)
            except UnreachableTaskError:
                continue
            recordings.append(rec)
            made += 1
        if made < tasks_per_subject:
            raise ValueError(f"subject {sid}: only {made} reachable tasks available")
    return recordings
