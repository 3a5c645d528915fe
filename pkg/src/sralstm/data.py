"""Annotation parsing, regridding, window extraction, and synthetic scenes.

The on-disk annotation format is one observation per line:

    frame_id ped_id x y

whitespace-separated, UTF-8, with ``#`` starting a comment and blank lines
ignored. frame_id and ped_id are integers; x and y are finite floats in
meters. Mixed-rate sources are regridded onto a 0.4 s frame grid by linear
interpolation per pedestrian before windows are built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

GRID_DT = 0.4

CANONICAL_SCENES = ("ETH-univ", "ETH-hotel", "UCY-zara01", "UCY-zara02", "UCY-univ")


class DataError(ValueError):
    """Malformed or inconsistent trajectory data."""


class AnnotationError(DataError):
    """A bad line in an annotation file; the message carries the line number."""


@dataclass(frozen=True)
class RawAnnotation:
    frame: int
    ped: int
    x: float
    y: float


@dataclass
class Track:
    """One pedestrian's contiguous gridded positions starting at a frame index."""

    start: int
    points: np.ndarray  # (L, 2)

    @property
    def end(self) -> int:
        """Exclusive final frame index."""
        return self.start + len(self.points)

    def covers(self, lo: int, hi: int) -> bool:
        return self.start <= lo and hi <= self.end

    def slice(self, lo: int, hi: int) -> np.ndarray:
        return self.points[lo - self.start:hi - self.start]


@dataclass
class Scene:
    """Gridded trajectories for one recording location."""

    name: str
    tracks: dict = field(default_factory=dict)  # ped_id -> Track
    dt: float = GRID_DT
    dropped: int = 0  # pedestrians discarded during regridding

    def frame_range(self):
        """(lo, hi) frame indices spanning all tracks, hi exclusive."""
        if not self.tracks:
            raise DataError(f"scene {self.name!r} has no tracks")
        lo = min(t.start for t in self.tracks.values())
        hi = max(t.end for t in self.tracks.values())
        return lo, hi


@dataclass
class TrajectoryWindow:
    """A fixed-length slice of a scene with only fully-present pedestrians.

    positions[k] holds 20 (obs + pred) frames for ped_ids[k]; every value
    is finite and every pedestrian spans the whole window.
    """

    scene_name: str
    start_frame: int
    ped_ids: list
    positions: np.ndarray  # (P, obs_len + pred_len, 2)
    obs_len: int
    pred_len: int

    @property
    def n_frames(self) -> int:
        return self.positions.shape[1]

    @property
    def anchor_index(self) -> int:
        return self.obs_len - 1

    def index_of(self, ped) -> int:
        try:
            return self.ped_ids.index(ped)
        except ValueError:
            raise KeyError(f"pedestrian {ped!r} not in window") from None

    def track(self, ped) -> np.ndarray:
        return self.positions[self.index_of(ped)]


def parse_annotations(source) -> list:
    """Parse annotation text (a string, open file, or line iterable).

    Raises AnnotationError with a 1-based line number for malformed lines
    and for duplicate (frame, pedestrian) observations.
    """
    if isinstance(source, str):
        lines = source.splitlines()
    else:
        lines = source
    rows: list[RawAnnotation] = []
    seen = set()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise AnnotationError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            frame = int(parts[0])
            ped = int(parts[1])
        except ValueError:
            raise AnnotationError(
                f"line {lineno}: frame_id and ped_id must be integers"
            ) from None
        try:
            x = float(parts[2])
            y = float(parts[3])
        except ValueError:
            raise AnnotationError(f"line {lineno}: x and y must be numbers") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise AnnotationError(f"line {lineno}: non-finite coordinate")
        key = (frame, ped)
        if key in seen:
            raise AnnotationError(
                f"line {lineno}: duplicate observation for frame {frame}, pedestrian {ped}"
            )
        seen.add(key)
        rows.append(RawAnnotation(frame, ped, x, y))
    return rows


def regrid(annotations: Sequence[RawAnnotation], source_timestep: float,
           name: str = "scene") -> Scene:
    """Interpolate each pedestrian onto the 0.4 s grid.

    Grid frame k sits at time k * 0.4 s; a pedestrian contributes the grid
    frames inside its observed span (no extrapolation). Pedestrians left
    with fewer than two observations are dropped and counted on the scene.
    """
    if source_timestep <= 0:
        raise DataError(f"source timestep must be positive, got {source_timestep}")
    by_ped: dict[int, list[RawAnnotation]] = {}
    for row in annotations:
        by_ped.setdefault(row.ped, []).append(row)
    scene = Scene(name=name)
    # tolerance for deciding that a time lands exactly on a grid line
    fuzz = 1e-9
    for ped in sorted(by_ped):
        rows = sorted(by_ped[ped], key=lambda r: r.frame)
        if len(rows) < 2:
            scene.dropped += 1
            continue
        times = np.array([r.frame * source_timestep for r in rows])
        xs = np.array([r.x for r in rows])
        ys = np.array([r.y for r in rows])
        k_lo = math.ceil(times[0] / GRID_DT - fuzz)
        k_hi = math.floor(times[-1] / GRID_DT + fuzz)
        if k_hi < k_lo:
            # observed span crosses no grid line; nothing representable
            scene.dropped += 1
            continue
        ks = np.arange(k_lo, k_hi + 1)
        grid_times = np.minimum(np.maximum(ks * GRID_DT, times[0]), times[-1])
        points = np.stack([np.interp(grid_times, times, xs),
                           np.interp(grid_times, times, ys)], axis=1)
        scene.tracks[ped] = Track(start=int(k_lo), points=points)
    return scene


def build_windows(scene: Scene, obs_len: int = 8, pred_len: int = 12,
                  stride: int = 1) -> list:
    """All fixed-length windows of a scene, keeping fully-present pedestrians.

    A scene with F frames yields floor((F - obs_len - pred_len) / stride) + 1
    starts; windows with no fully-present pedestrian are dropped.
    """
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    total = obs_len + pred_len
    lo, hi = scene.frame_range()
    windows = []
    for start in range(lo, hi - total + 1, stride):
        ids = [p for p, t in sorted(scene.tracks.items()) if t.covers(start, start + total)]
        if not ids:
            continue
        positions = np.stack([scene.tracks[p].slice(start, start + total) for p in ids])
        windows.append(TrajectoryWindow(
            scene_name=scene.name, start_frame=start, ped_ids=ids,
            positions=positions, obs_len=obs_len, pred_len=pred_len))
    return windows


def rotate_window(window: TrajectoryWindow, angle: float) -> TrajectoryWindow:
    """Rigidly rotate all positions about the scene origin."""
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return replace(window, ped_ids=list(window.ped_ids),
                   positions=window.positions @ rot.T)


def leave_one_out(scenes: Mapping[str, Scene], held_out: str,
                  obs_len: int = 8, pred_len: int = 12, stride: int = 1):
    """Split scene windows into (train, test) with one scene held out.

    The canonical benchmark uses the five scenes in CANONICAL_SCENES; any
    mapping of at least two named scenes works. Training windows come from
    every scene except held_out, test windows from held_out only, with no
    augmentation applied to either here.
    """
    if held_out not in scenes:
        raise DataError(
            f"unknown scene {held_out!r}; have {sorted(scenes)}"
        )
    if len(scenes) < 2:
        raise DataError("leave-one-out needs at least two scenes")
    train: list[TrajectoryWindow] = []
    for name in sorted(scenes):
        if name == held_out:
            continue
        train.extend(build_windows(scenes[name], obs_len, pred_len, stride))
    test = build_windows(scenes[held_out], obs_len, pred_len, stride)
    return train, test


# ---------------------------------------------------------------------------
# synthetic scenarios

SCENARIO_KINDS = ("parallel", "merging", "following", "meeting", "group_avoid")


@dataclass(frozen=True)
class SynthParams:
    speed: float = 1.2      # m/s
    spacing: float = 1.0    # lateral or leader-follower gap, meters
    noise: float = 0.0      # per-frame gaussian position noise, meters
    frames: int = 20


def synth_scenario(kind: str, params: Optional[SynthParams] = None,
                   seed: int = 0) -> Scene:
    """Deterministic synthetic interaction scene on the 0.4 s grid."""
    p = params or SynthParams()
    if p.frames < 2:
        raise DataError("a scenario needs at least two frames")
    rng = np.random.default_rng(seed)
    builders = {
        "parallel": _synth_parallel,
        "merging": _synth_merging,
        "following": _synth_following,
        "meeting": _synth_meeting,
        "group_avoid": _synth_group_avoid,
    }
    if kind not in builders:
        raise DataError(f"unknown scenario kind {kind!r} (options: {', '.join(SCENARIO_KINDS)})")
    tracks = builders[kind](p, rng)
    scene = Scene(name=f"{kind}-{seed}")
    for ped, pts in enumerate(tracks, start=1):
        pts = np.asarray(pts, dtype=np.float64)
        if p.noise > 0:
            pts = pts + rng.normal(0.0, p.noise, size=pts.shape)
        scene.tracks[ped] = Track(start=0, points=pts)
    return scene


def _times(p: SynthParams) -> np.ndarray:
    return np.arange(p.frames) * GRID_DT


def _heading(rng) -> np.ndarray:
    a = rng.uniform(0.0, 2.0 * math.pi)
    return np.array([math.cos(a), math.sin(a)])


def _perp(u: np.ndarray) -> np.ndarray:
    return np.array([-u[1], u[0]])


def _line(origin, direction, speed, times) -> np.ndarray:
    return origin[np.newaxis, :] + np.outer(times * speed, direction)


def _synth_parallel(p: SynthParams, rng) -> list:
    """Two walkers sharing a heading at a constant lateral offset."""
    t = _times(p)
    u = _heading(rng)
    origin = rng.uniform(-2.0, 2.0, size=2)
    a = _line(origin, u, p.speed, t)
    b = a + _perp(u) * p.spacing
    return [a, b]


def _synth_merging(p: SynthParams, rng) -> list:
    """Two walkers converge toward a shared point, then continue together."""
    t = _times(p)
    u = _heading(rng)
    merge_frame = p.frames // 2
    meet = rng.uniform(-1.0, 1.0, size=2)
    after = _line(meet, u, p.speed, t[: p.frames - merge_frame])
    tracks = []
    for side in (1.0, -1.0):
        approach_dir = _rot(u, side * rng.uniform(0.5, 1.2))
        start = meet - approach_dir * p.speed * (merge_frame * GRID_DT)
        before = _line(start, approach_dir, p.speed, t[:merge_frame])
        lane = after + _perp(u) * (side * p.spacing / 2.0)
        tracks.append(np.concatenate([before, lane], axis=0))
    return tracks


def _rot(u: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([c * u[0] - s * u[1], s * u[0] + c * u[1]])


def _synth_following(p: SynthParams, rng) -> list:
    """A leader making one seeded turn and a follower replaying its path.

    The follower trails by spacing/speed seconds, so the follower's future
    repeats the leader's recent past: its post-turn motion is knowable only
    from the leader's track.
    """
    lag = max(1, round(p.spacing / (p.speed * GRID_DT)))
    u = _heading(rng)
    turn_frame = int(rng.integers(p.frames // 3, 2 * p.frames // 3))
    turn = rng.uniform(0.6, 1.4) * (1.0 if rng.random() < 0.5 else -1.0)
    origin = rng.uniform(-2.0, 2.0, size=2)
    total = p.frames + lag
    pts = np.empty((total, 2))
    pos = origin.copy()
    direction = u
    for k in range(total):
        pts[k] = pos
        if k == turn_frame + lag:
            direction = _rot(direction, turn)
        pos = pos + direction * p.speed * GRID_DT
    leader = pts[lag:]
    follower = pts[:-lag] if lag > 0 else pts.copy()
    return [leader, follower]


def _synth_meeting(p: SynthParams, rng) -> list:
    """Two head-on walkers who side-step while close, then fall back in line.

    The dodge is triggered by mutual distance, so its timing is a function
    of the other walker's approach.
    """
    t = _times(p)
    u = _heading(rng)
    gap0 = rng.uniform(0.75, 1.05) * p.speed * (p.frames - 1) * GRID_DT
    mid = rng.uniform(-1.0, 1.0, size=2)
    a_base = _line(mid - u * gap0 / 2.0, u, p.speed, t)
    b_base = _line(mid + u * gap0 / 2.0, -u, p.speed, t)
    dodge_dist = 2.0
    lateral = np.zeros(p.frames)
    for k in range(p.frames):
        along = float((b_base[k] - a_base[k]) @ u)  # signed head-on separation
        if abs(along) < dodge_dist:
            lateral[k] = (p.spacing / 2.0) * (1.0 - abs(along) / dodge_dist)
    offset = np.outer(lateral, _perp(u))
    return [a_base + offset, b_base - offset]


def _synth_group_avoid(p: SynthParams, rng) -> list:
    """Two walking pairs meet head-on; each pair shifts aside as a unit."""
    t = _times(p)
    u = _heading(rng)
    gap0 = rng.uniform(0.75, 1.05) * p.speed * (p.frames - 1) * GRID_DT
    mid = rng.uniform(-1.0, 1.0, size=2)
    a_base = _line(mid - u * gap0 / 2.0, u, p.speed, t)
    b_base = _line(mid + u * gap0 / 2.0, -u, p.speed, t)
    dodge_dist = 2.5
    lateral = np.zeros(p.frames)
    for k in range(p.frames):
        along = float((b_base[k] - a_base[k]) @ u)
        if abs(along) < dodge_dist:
            lateral[k] = p.spacing * (1.0 - abs(along) / dodge_dist)
    offset = np.outer(lateral, _perp(u))
    lane = _perp(u) * (p.spacing / 2.0)
    return [
        a_base + offset - lane, a_base + offset + lane,
        b_base - offset - lane, b_base - offset + lane,
    ]


def scene_to_annotation_text(scene: Scene) -> str:
    """Render a gridded scene back into the annotation format."""
    lines = ["# frame_id ped_id x y"]
    rows = []
    for ped, track in scene.tracks.items():
        for k, (x, y) in enumerate(track.points):
            rows.append((track.start + k, ped, x, y))
    rows.sort()
    for frame, ped, x, y in rows:
        lines.append(f"{frame} {ped} {float(x)!r} {float(y)!r}")
    return "\n".join(lines) + "\n"
