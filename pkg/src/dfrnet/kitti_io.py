"""KITTI object label / calibration / result files, difficulty strata, projection."""
from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class KittiParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.reason, self.line, self.path = message, line, path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class ProjectionError(ValueError):
    """Point lies on or behind the image plane."""


DONT_CARE = "DontCare"


@dataclass(frozen=True)
class KittiObjectLabel:
    category: str
    truncation: float
    occlusion: int
    alpha: float
    box2d: tuple[float, float, float, float]
    dims: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]
    rotation_y: float
    score: float | None = None

    @property
    def box_height(self) -> float:
        return self.box2d[3] - self.box2d[1]


@dataclass(frozen=True)
class CalibP2:
    p2: np.ndarray  # 3 x 4

    def __post_init__(self):
        p2 = np.asarray(self.p2, dtype=np.float64)
        if p2.shape != (3, 4):
            raise ValueError(f"P2 must be 3x4, got {p2.shape}")
        if not p2[0, 0] > 0:
            raise ValueError("P2 focal length must be positive")
        object.__setattr__(self, "p2", p2)

    @classmethod
    def pinhole(cls, focal: float, cu: float, cv: float) -> "CalibP2":
        return cls(np.array([[focal, 0.0, cu, 0.0], [0.0, focal, cv, 0.0], [0.0, 0.0, 1.0, 0.0]]))

    def __eq__(self, other):
        return isinstance(other, CalibP2) and np.array_equal(self.p2, other.p2)

    __hash__ = None


class Difficulty(enum.IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2
    IGNORED = 3

    @property
    def label(self) -> str:
        return ("Easy", "Mod.", "Hard", "Ignored")[self.value]


# (min box height px, max occlusion, max truncation)
DIFFICULTY_THRESHOLDS = {
    Difficulty.EASY: (40.0, 0, 0.15),
    Difficulty.MODERATE: (25.0, 1, 0.30),
    Difficulty.HARD: (25.0, 2, 0.50),
}


def _number(tok: str, what: str, lineno: int) -> float:
    try:
        x = float(tok)
    except ValueError:
        raise KittiParseError(f"field {what!r} is not numeric: {tok!r}", lineno) from None
    if not math.isfinite(x):
        raise KittiParseError(f"field {what!r} is not finite: {tok!r}", lineno)
    return x


def parse_label_line(line: str, lineno: int = 1) -> KittiObjectLabel:
    f = line.split()
    if len(f) not in (15, 16):
        raise KittiParseError(f"expected 15 or 16 fields, found {len(f)}", lineno)
    names = ("truncated", "occluded", "alpha", "left", "top", "right", "bottom",
             "height", "width", "length", "x", "y", "z", "rotation_y", "score")
    nums = [_number(tok, name, lineno) for tok, name in zip(f[1:], names)]
    occ = nums[1]
    if occ != int(occ):
        raise KittiParseError(f"occlusion must be an integer, got {f[2]!r}", lineno)
    box = tuple(nums[3:7])
    if f[0] != DONT_CARE and not (box[0] <= box[2] and box[1] <= box[3]):
        raise KittiParseError(f"2D box {box} is not ordered", lineno)
    return KittiObjectLabel(
        category=f[0], truncation=nums[0], occlusion=int(occ), alpha=nums[2], box2d=box,
        dims=tuple(nums[7:10]), location=tuple(nums[10:13]), rotation_y=nums[13],
        score=nums[14] if len(f) == 16 else None,
    )


def parse_label_file(text: str | bytes) -> list[KittiObjectLabel]:
    """Parse a label or result file; blank lines are skipped."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            line = bytes(text)[:exc.start].count(b"\n") + 1
            raise KittiParseError("not valid UTF-8 text", line) from None
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            out.append(parse_label_line(line, lineno))
    return out


def _fmt(x: float) -> str:
    s = f"{x:.4f}"
    return "0.0000" if s == "-0.0000" else s


def format_label(label: KittiObjectLabel, with_score: bool | None = None) -> str:
    with_score = label.score is not None if with_score is None else with_score
    parts = [label.category, f"{label.truncation:.2f}", str(int(label.occlusion)), _fmt(label.alpha)]
    parts += [_fmt(v) for v in (*label.box2d, *label.dims, *label.location, label.rotation_y)]
    if with_score:
        if label.score is None:
            raise ValueError(f"label {label.category} has no score")
        parts.append(_fmt(label.score))
    return " ".join(parts)


def write_label_file(labels) -> str:
    return "".join(format_label(lb) + "\n" for lb in labels)


def write_result_file(labels) -> str:
    """Detections in devkit order, 16 fields per line; every label needs a score."""
    for lb in labels:
        if lb.score is None:
            raise ValueError(f"detection {lb.category} at {lb.location} has no score")
    return "".join(format_label(lb, with_score=True) + "\n" for lb in labels)


def parse_calib_file(text: str | bytes) -> CalibP2:
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    for lineno, line in enumerate(text.splitlines(), start=1):
        key, sep, rest = line.partition(":")
        if sep and key.strip() == "P2":
            toks = rest.split()
            if len(toks) != 12:
                raise KittiParseError(f"P2 needs 12 numbers, found {len(toks)}", lineno)
            vals = [_number(t, "P2", lineno) for t in toks]
            try:
                return CalibP2(np.array(vals).reshape(3, 4))
            except ValueError as exc:
                raise KittiParseError(str(exc), lineno) from None
    raise KittiParseError("no 'P2:' entry")


def write_calib_file(calib: CalibP2) -> str:
    return "P2: " + " ".join(repr(float(v)) for v in calib.p2.reshape(-1)) + "\n"


def project_point(calib: CalibP2, xyz) -> tuple[float, float]:
    """Pinhole projection of a camera-frame point through P2."""
    x, y, z = (float(c) for c in xyz)
    if z <= 0:
        raise ProjectionError(f"point at depth {z} is not in front of the camera")
    hom = calib.p2 @ np.array([x, y, z, 1.0])
    if hom[2] <= 0:
        raise ProjectionError("projected point has non-positive homogeneous depth")
    return float(hom[0] / hom[2]), float(hom[1] / hom[2])


project_center = project_point


def box3d_corners(dims, location, rotation_y: float) -> np.ndarray:
    """8 x 3 corners of a KITTI box (dims h, w, l; location is the bottom centre)."""
    h, w, l = dims
    x = np.array([l, l, -l, -l, l, l, -l, -l]) / 2.0
    y = np.array([0, 0, 0, 0, -h, -h, -h, -h], dtype=np.float64)
    z = np.array([w, -w, -w, w, w, -w, -w, w]) / 2.0
    c, s = math.cos(rotation_y), math.sin(rotation_y)
    rot = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return (rot @ np.vstack([x, y, z])).T + np.asarray(location, dtype=np.float64)


def project_box(calib: CalibP2, dims, location, rotation_y: float) -> tuple[float, float, float, float]:
    """Tight 2D box around the projected 3D corners."""
    pts = [project_point(calib, p) for p in box3d_corners(dims, location, rotation_y)]
    us, vs = [p[0] for p in pts], [p[1] for p in pts]
    return min(us), min(vs), max(us), max(vs)


def difficulty_of(label: KittiObjectLabel, box_height_px: float | None = None) -> Difficulty:
    """Easiest difficulty the label qualifies for."""
    height = label.box_height if box_height_px is None else box_height_px
    for level in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD):
        min_h, max_occ, max_trunc = DIFFICULTY_THRESHOLDS[level]
        if height >= min_h and label.occlusion <= max_occ and label.truncation <= max_trunc:
            return level
    return Difficulty.IGNORED


def counts_at(label: KittiObjectLabel, level: Difficulty | None) -> bool:
    """Whether the label is evaluated at ``level`` (easier labels count at harder levels)."""
    if level is None:
        return True
    d = difficulty_of(label)
    return d != Difficulty.IGNORED and d <= level


def frame_name(frame_id: int) -> str:
    return f"{int(frame_id):06d}.txt"


def read_label_dir(path: str | os.PathLike, default_score: float | None = None) -> dict[str, list[KittiObjectLabel]]:
    """Read every ``*.txt`` in a directory, keyed by frame stem."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"directory not found: {root}")
    frames = {}
    for file in sorted(root.glob("*.txt")):
        try:
            labels = parse_label_file(file.read_bytes())
        except KittiParseError as exc:
            raise KittiParseError(exc.reason, exc.line, str(file)) from None
        if default_score is not None:
            labels = [lb if lb.score is not None else replace(lb, score=default_score) for lb in labels]
        frames[file.stem] = labels
    return frames


def write_label_dir(path: str | os.PathLike, frames: dict, results: bool = False) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for key, labels in frames.items():
        name = frame_name(key) if isinstance(key, int) else f"{key}.txt"
        text = write_result_file(labels) if results else write_label_file(labels)
        (root / name).write_text(text)
