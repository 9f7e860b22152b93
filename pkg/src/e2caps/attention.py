"""AU-aware attention maps built from facial landmarks.

Landmarks live in a 100x100 reference frame.  AU centers are derived from
landmarks by shifting them a multiple of the inner-eye-corner distance, and
every center paints a 15x15 patch whose weight falls off linearly with the
Manhattan distance to the center (``1 - 0.07 * d``).  Overlapping patches
combine by per-pixel maximum.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import _kernels

logger = logging.getLogger(__name__)

MAP_SIZE = 100
AU_RADIUS = 7
FALLOFF = 0.07


class LandmarkError(ValueError):
    pass


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray  # (n, 2) float, x then y
    inner_left: int
    inner_right: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        n = len(pts)
        if not (0 <= self.inner_left < n and 0 <= self.inner_right < n):
            raise LandmarkError(f"inner-corner indices {self.inner_left},{self.inner_right} "
                                f"out of range for {n} landmarks")
        if np.any(pts < 0) or np.any(pts >= MAP_SIZE):
            raise LandmarkError("landmark coordinates must lie in [0, 100)")

    @property
    def inner_corner_distance(self) -> float:
        d = self.points[self.inner_left] - self.points[self.inner_right]
        return float(math.hypot(d[0], d[1]))


@dataclass(frozen=True)
class AuRule:
    base: int
    dx: float = 0.0
    dy: float = 0.0
    direct: bool = False

    def __post_init__(self):
        if self.base < 0:
            raise ValueError("AU rule base index must be non-negative")
        if not (math.isfinite(self.dx) and math.isfinite(self.dy)):
            raise ValueError("AU rule offsets must be finite")


@dataclass
class AttentionMap:
    grid: np.ndarray
    centers: list = field(default_factory=list)
    dropped: list = field(default_factory=list)


def normalize_landmarks(points, width: float, height: float,
                        inner_left: int = 1, inner_right: int = 2) -> LandmarkSet:
    """Scale source-pixel landmarks into the 100x100 frame, clamping to [0, 99]."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise LandmarkError("empty landmark list")
    if width <= 0 or height <= 0:
        raise LandmarkError("source dimensions must be positive")
    scaled = pts * np.array([MAP_SIZE / width, MAP_SIZE / height])
    scaled = np.clip(scaled, 0, MAP_SIZE - 1)
    return LandmarkSet(scaled, inner_left, inner_right)


def compute_au_centers(landmarks: LandmarkSet, rules: Sequence[AuRule],
                       return_dropped: bool = False):
    """Integer AU centers; out-of-bounds centers are dropped and logged."""
    dist = landmarks.inner_corner_distance
    if dist == 0:
        raise LandmarkError("inner eye corners coincide; scaled distance undefined")
    centers, dropped = [], []
    n = len(landmarks.points)
    for rule in rules:
        if rule.base >= n:
            raise LandmarkError(f"AU rule base {rule.base} >= landmark count {n}")
        x, y = landmarks.points[rule.base]
        if not rule.direct:
            x += rule.dx * dist
            y += rule.dy * dist
        # round half away from zero, not numpy's banker's rounding
        cx = int(math.floor(x + 0.5))
        cy = int(math.floor(y + 0.5))
        if 0 <= cx < MAP_SIZE and 0 <= cy < MAP_SIZE:
            centers.append((cx, cy))
        else:
            logger.warning("AU center (%d, %d) from landmark %d out of bounds; dropped",
                           cx, cy, rule.base)
            dropped.append((cx, cy))
    return (centers, dropped) if return_dropped else centers


def render_attention_map(centers: Iterable[tuple[int, int]]) -> AttentionMap:
    centers = [(int(x), int(y)) for x, y in centers]
    for cx, cy in centers:
        if not (0 <= cx < MAP_SIZE and 0 <= cy < MAP_SIZE):
            raise ValueError(f"center ({cx}, {cy}) outside the {MAP_SIZE}x{MAP_SIZE} grid")
    grid = _kernels.active.render(centers, MAP_SIZE, AU_RADIUS, FALLOFF)
    return AttentionMap(grid=grid, centers=centers)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    # corner-aligned linear interpolation weights, shape (n_out, n_in)
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        if n_out == 1:
            pos = np.array([0.0]) if n_in == 1 else np.array([(n_in - 1) / 2.0])
        else:
            pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(pos).astype(int)
    lo = np.clip(lo, 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_map(grid, height: int, width: int) -> np.ndarray:
    """Bilinear resize with corner alignment; accepts (H,W) or batched (B,H,W)."""
    if height <= 0 or width <= 0:
        raise ValueError("target dimensions must be positive")
    if isinstance(grid, AttentionMap):
        grid = grid.grid
    g = np.asarray(grid, dtype=np.float64)
    ry = _interp_matrix(height, g.shape[-2])
    rx = _interp_matrix(width, g.shape[-1])
    out = ry @ g @ rx.T
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_HEADER = re.compile(r"#\s*landmarks\s+v1\s+n=(\d+)\s+inner_left=(\d+)\s+inner_right=(\d+)")


def format_landmarks(points, inner_left: int, inner_right: int) -> str:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lines = [f"# landmarks v1 n={len(pts)} inner_left={inner_left} inner_right={inner_right}"]
    lines += [f"{x!r},{y!r}" for x, y in pts.tolist()]
    return "\n".join(lines) + "\n"


def parse_landmarks(text: str):
    """Return (points (n,2), inner_left, inner_right) from landmark-file text."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise LandmarkError("empty landmark file")
    m = _HEADER.match(lines[0])
    if not m:
        raise LandmarkError(f"bad landmark header: {lines[0]!r}")
    n, il, ir = (int(v) for v in m.groups())
    pts = []
    for ln in lines[1:]:
        try:
            x, y = ln.split(",")
            pts.append((float(x), float(y)))
        except ValueError:
            raise LandmarkError(f"bad landmark line: {ln!r}") from None
    if len(pts) != n:
        raise LandmarkError(f"header says {n} landmarks, file has {len(pts)}")
    return np.array(pts, dtype=np.float64).reshape(-1, 2), il, ir


def read_landmarks(path):
    return parse_landmarks(Path(path).read_text())


def write_landmarks(path, points, inner_left: int, inner_right: int) -> None:
    Path(path).write_text(format_landmarks(points, inner_left, inner_right))


def parse_rules(text: str) -> list[AuRule]:
    """One rule per line: ``base,dx,dy`` or ``base,direct``; ``#`` starts a comment."""
    rules = []
    for raw in text.splitlines():
        ln = raw.split("#", 1)[0].strip()
        if not ln:
            continue
        parts = [p.strip() for p in ln.split(",")]
        try:
            if len(parts) == 2 and parts[1] == "direct":
                rules.append(AuRule(int(parts[0]), direct=True))
            elif len(parts) == 3:
                rules.append(AuRule(int(parts[0]), float(parts[1]), float(parts[2])))
            else:
                raise ValueError
        except ValueError:
            raise ValueError(f"bad AU rule line: {raw!r}") from None
    return rules


def read_rules(path) -> list[AuRule]:
    return parse_rules(Path(path).read_text())


# Landmark layout used by the synthetic generator (13 points):
#   0/3 left/right eye outer corner, 1/2 left/right eye inner corner,
#   4/7 left/right brow outer end, 5/6 left/right brow inner end,
#   8/9 left/right mouth corner, 10 upper lip center, 11 lower lip center,
#   12 mouth center.
DEFAULT_RULES_TEXT = """\
# base,dx,dy in inner-corner-distance units, or base,direct
5,0,-0.5     # AU1 inner brow raiser
6,0,-0.5
4,0,-0.333   # AU2 outer brow raiser
7,0,-0.333
5,0,0.333    # AU4 brow lowerer
6,0,0.333
0,0,1.0      # AU6 cheek raiser
3,0,1.0
1,direct     # AU7 lid tightener
2,direct
8,direct     # AU12 lip corner puller
9,direct
8,0,0.5      # AU15 lip corner depressor
9,0,0.5
10,direct    # AU25 lips part
11,direct
"""

DEFAULT_RULES = parse_rules(DEFAULT_RULES_TEXT)


def attention_from_landmarks(landmarks: LandmarkSet,
                             rules: Optional[Sequence[AuRule]] = None) -> AttentionMap:
    centers, dropped = compute_au_centers(landmarks, rules or DEFAULT_RULES,
                                          return_dropped=True)
    amap = render_attention_map(centers)
    amap.dropped = dropped
    return amap


def save_png(amap, path) -> None:
    """8-bit grayscale export, value = round(255 * weight)."""
    from PIL import Image

    grid = amap.grid if isinstance(amap, AttentionMap) else np.asarray(amap)
    img = np.floor(255 * np.clip(grid, 0, 1) + 0.5).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
