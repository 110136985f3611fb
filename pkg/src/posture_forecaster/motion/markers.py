"""Full-body plug-in gait marker set (39 markers) plus T12 and S1, and the
four segment groupings the per-segment models are trained on."""

from __future__ import annotations

from dataclasses import dataclass

HEAD = ("LFHD", "RFHD", "LBHD", "RBHD")
LEFT_ARM = ("LSHO", "LUPA", "LELB", "LFRM", "LWRA", "LWRB", "LFIN")
RIGHT_ARM = ("RSHO", "RUPA", "RELB", "RFRM", "RWRA", "RWRB", "RFIN")
TRUNK = ("C7", "T10", "T12", "CLAV", "STRN", "RBAK", "S1")
PELVIS = ("LASI", "RASI", "LPSI", "RPSI")
LEFT_LEG = ("LTHI", "LKNE", "LTIB", "LANK", "LHEE", "LTOE")
RIGHT_LEG = ("RTHI", "RKNE", "RTIB", "RANK", "RHEE", "RTOE")

MARKER_NAMES: tuple[str, ...] = HEAD + LEFT_ARM + RIGHT_ARM + TRUNK + PELVIS + LEFT_LEG + RIGHT_LEG

SEGMENT_NAMES = ("head", "arms", "body_pelvic", "legs")
EXPECTED_COUNTS = {"head": 4, "arms": 14, "body_pelvic": 11, "legs": 12}
N_META = 7


@dataclass(frozen=True)
class SegmentSpec:
    name: str
    member_markers: tuple[str, ...]
    constraint_pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.name not in EXPECTED_COUNTS:
            raise ValueError(f"unknown segment {self.name!r}")
        if len(self.member_markers) != EXPECTED_COUNTS[self.name]:
            raise ValueError(
                f"segment {self.name} needs {EXPECTED_COUNTS[self.name]} markers, "
                f"got {len(self.member_markers)}")
        if len(set(self.member_markers)) != len(self.member_markers):
            raise ValueError(f"duplicate markers in segment {self.name}")
        for a, b in self.constraint_pairs:
            if a not in self.member_markers or b not in self.member_markers:
                raise ValueError(f"constraint pair ({a}, {b}) not inside segment {self.name}")

    @property
    def n_markers(self) -> int:
        return len(self.member_markers)

    @property
    def n_features(self) -> int:
        return 3 * self.n_markers + N_META

    def pair_indices(self) -> list[tuple[int, int]]:
        """Marker positions (within the segment) of each constraint pair."""
        pos = {m: i for i, m in enumerate(self.member_markers)}
        return [(pos[a], pos[b]) for a, b in self.constraint_pairs]


SEGMENTS: dict[str, SegmentSpec] = {
    "head": SegmentSpec("head", HEAD),
    "arms": SegmentSpec(
        "arms", LEFT_ARM + RIGHT_ARM,
        (("RSHO", "RELB"), ("LSHO", "LELB"), ("RELB", "RWRA"), ("LELB", "LWRA")),
    ),
    "body_pelvic": SegmentSpec("body_pelvic", TRUNK + PELVIS),
    "legs": SegmentSpec("legs", LEFT_LEG + RIGHT_LEG, (("RKNE", "RANK"), ("LKNE", "LANK"))),
}


def get_segment(name: str) -> SegmentSpec:
    try:
        return SEGMENTS[name]
    except KeyError:
        raise ValueError(f"unknown segment {name!r}; choose from {', '.join(SEGMENT_NAMES)}") from None
