"""Text file formats for task recordings.

A task is stored as two files sharing a stem: ``<stem>.trajectory.csv`` with
one row per (frame, marker) and ``<stem>.meta.txt`` holding ``key=value``
lines. A dataset manifest lists the (trajectory, metadata) pairs, with paths
relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .recording import TaskRecording

TRAJECTORY_HEADER = ["frame", "marker", "x_mm", "y_mm", "z_mm"]
META_KEYS = ("subject_id", "mass_kg", "height_cm", "lifting_technique", "handling_technique",
             "load_x_mm", "load_y_mm", "load_z_mm", "sample_rate_hz")
TRAJECTORY_SUFFIX = ".trajectory.csv"
META_SUFFIX = ".meta.txt"
MANIFEST_NAME = "manifest.csv"
PROVENANCE_VALUES = ("measured", "predicted")


class SchemaError(ValueError):
    """A file does not follow the expected layout."""


def task_paths(stem) -> tuple[Path, Path]:
    stem = str(stem)
    for suffix in (TRAJECTORY_SUFFIX, META_SUFFIX):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    return Path(stem + TRAJECTORY_SUFFIX), Path(stem + META_SUFFIX)


def format_trajectory(frames: np.ndarray, marker_names, provenance: list[str] | None = None) -> str:
    frames = np.asarray(frames, dtype=np.float64)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER + (["provenance"] if provenance is not None else []))
    for f in range(frames.shape[0]):
        for m, name in enumerate(marker_names):
            row = [f + 1, name] + [repr(float(v)) for v in frames[f, m]]
            if provenance is not None:
                row.append(provenance[f])
            w.writerow(row)
    return buf.getvalue()


def write_trajectory(path, frames: np.ndarray, marker_names, provenance: list[str] | None = None) -> Path:
    path = Path(path)
    path.write_text(format_trajectory(frames, marker_names, provenance))
    return path


def read_trajectory(path) -> tuple[np.ndarray, tuple[str, ...], list[str] | None]:
    """(frames (F, M, 3), marker names, per-frame provenance or None)."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty trajectory file")
    header = rows[0]
    has_prov = header == TRAJECTORY_HEADER + ["provenance"]
    if header != TRAJECTORY_HEADER and not has_prov:
        raise SchemaError(f"{path}: header must be {','.join(TRAJECTORY_HEADER)}, got {','.join(header)}")
    body = rows[1:]
    names: list[str] = []
    for row in body:
        if row[0] != "1":
            break
        names.append(row[1])
    M = len(names)
    if M == 0 or len(body) % M:
        raise SchemaError(f"{path}: rows do not form complete frames")
    F = len(body) // M
    frames = np.empty((F, M, 3))
    prov = [] if has_prov else None
    for i, row in enumerate(body):
        f, m = divmod(i, M)
        if len(row) != len(header):
            raise SchemaError(f"{path}: line {i + 2} has {len(row)} fields, expected {len(header)}")
        if row[0] != str(f + 1) or row[1] != names[m]:
            raise SchemaError(f"{path}: line {i + 2} expected frame {f + 1} marker {names[m]}")
        try:
            frames[f, m] = [float(v) for v in row[2:5]]
        except ValueError:
            raise SchemaError(f"{path}: line {i + 2} has a non-numeric coordinate") from None
        if has_prov and m == 0:
            if row[5] not in PROVENANCE_VALUES:
                raise SchemaError(f"{path}: line {i + 2} provenance {row[5]!r} not in {PROVENANCE_VALUES}")
            prov.append(row[5])
    return frames, tuple(names), prov


def format_metadata(rec: TaskRecording) -> str:
    values = {
        "subject_id": rec.subject_id,
        "mass_kg": repr(float(rec.mass)),
        "height_cm": repr(float(rec.height)),
        "lifting_technique": rec.lifting_technique,
        "handling_technique": rec.handling_technique,
        "load_x_mm": repr(float(rec.load_position[0])),
        "load_y_mm": repr(float(rec.load_position[1])),
        "load_z_mm": repr(float(rec.load_position[2])),
        "sample_rate_hz": repr(float(rec.sample_rate)),
    }
    return "".join(f"{k}={values[k]}\n" for k in META_KEYS)


def read_metadata(path) -> dict[str, str]:
    path = Path(path)
    meta = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise SchemaError(f"{path}: line {n} is not key=value")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    if set(meta) != set(META_KEYS):
        missing = sorted(set(META_KEYS) - set(meta))
        extra = sorted(set(meta) - set(META_KEYS))
        raise SchemaError(f"{path}: metadata keys mismatch (missing {missing}, unexpected {extra})")
    return meta


def write_task(rec: TaskRecording, stem) -> tuple[Path, Path]:
    traj, meta = task_paths(stem)
    traj.parent.mkdir(parents=True, exist_ok=True)
    write_trajectory(traj, rec.frames, rec.marker_names)
    meta.write_text(format_metadata(rec))
    return traj, meta


def read_task(stem, task_id: str | None = None) -> TaskRecording:
    traj, meta_path = task_paths(stem)
    for p in (traj, meta_path):
        if not p.exists():
            raise FileNotFoundError(f"missing task file {p}")
    frames, names, _ = read_trajectory(traj)
    meta = read_metadata(meta_path)
    try:
        return TaskRecording(
            subject_id=meta["subject_id"], mass=float(meta["mass_kg"]), height=float(meta["height_cm"]),
            lifting_technique=meta["lifting_technique"], handling_technique=meta["handling_technique"],
            load_position=[float(meta[k]) for k in ("load_x_mm", "load_y_mm", "load_z_mm")],
            sample_rate=float(meta["sample_rate_hz"]), frames=frames, marker_names=names,
            task_id=task_id or traj.name[: -len(TRAJECTORY_SUFFIX)])
    except ValueError as exc:
        raise SchemaError(f"{meta_path}: {exc}") from None


def write_dataset(recordings: list[TaskRecording], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["trajectory,metadata"]
    for rec in recordings:
        traj, meta = write_task(rec, out_dir / rec.task_id)
        lines.append(f"{traj.name},{meta.name}")
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> list[tuple[Path, Path]]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"missing dataset manifest {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["trajectory", "metadata"]:
        raise SchemaError(f"{path}: manifest header must be trajectory,metadata")
    pairs = []
    for n, row in enumerate(rows[1:], 2):
        if len(row) != 2:
            raise SchemaError(f"{path}: line {n} must hold two paths")
        pairs.append((path.parent / row[0], path.parent / row[1]))
    return pairs


def read_dataset(path) -> list[TaskRecording]:
    out = []
    for traj, meta in read_manifest(path):
        if traj.with_name(traj.name[: -len(TRAJECTORY_SUFFIX)] + META_SUFFIX) != meta:
            raise SchemaError(f"manifest pairs {traj.name} with {meta.name}; stems must match")
        out.append(read_task(traj))
    return out
