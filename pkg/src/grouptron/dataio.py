"""ETH/UCY trajectory files: parsing, windowing and density-filtered subsets.

Input lines hold ``frame ped_id x y`` separated by whitespace. Frames are
remapped to consecutive ticks using the GCD of the observed frame deltas, and
every tick is 0.4 s apart.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, TextIO

import numpy as np

DT = 0.4
HISTORY = 8
FUTURE = 12


class ParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class RawRecord:
    frame_id: int
    ped_id: int
    x: float
    y: float


@dataclass
class Track:
    start: int
    positions: np.ndarray  # (L, 2)

    @property
    def end(self) -> int:
        """Last tick (inclusive)."""
        return self.start + len(self.positions) - 1

    def covers(self, tick: int) -> bool:
        return self.start <= tick <= self.end

    def at(self, tick: int) -> np.ndarray:
        return self.positions[tick - self.start]


@dataclass
class Scene:
    name: str = "scene"
    dt: float = DT
    frame_origin: int = 0
    frame_stride: int = 1
    n_ticks: int = 0
    tracks: dict[int, Track] = field(default_factory=dict)

    @property
    def timesteps(self) -> list[int]:
        return list(range(self.n_ticks))

    def present_at(self, tick: int) -> list[int]:
        return [pid for pid, tr in sorted(self.tracks.items()) if tr.covers(tick)]

    def headcount(self) -> np.ndarray:
        counts = np.zeros(self.n_ticks, dtype=int)
        for tr in self.tracks.values():
            counts[tr.start : tr.end + 1] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dt": self.dt,
            "frame_origin": self.frame_origin,
            "frame_stride": self.frame_stride,
            "n_ticks": self.n_ticks,
            "tracks": {
                str(pid): {"start": tr.start, "positions": tr.positions.tolist()}
                for pid, tr in sorted(self.tracks.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        tracks = {
            int(pid): Track(int(t["start"]), np.asarray(t["positions"], dtype=float).reshape(-1, 2))
            for pid, t in d["tracks"].items()
        }
        return cls(d.get("name", "scene"), float(d.get("dt", DT)), int(d["frame_origin"]),
                   int(d["frame_stride"]), int(d["n_ticks"]), tracks)


def _as_int(token: str, line_no: int, what: str) -> int:
    try:
        v = float(token)
    except ValueError:
        raise ParseError(line_no, f"non-numeric {what} {token!r}") from None
    if not math.isfinite(v) or v != int(v):
        raise ParseError(line_no, f"{what} must be an integer, got {token!r}")
    return int(v)


def read_records(text: str | Iterable[str]) -> list[RawRecord]:
    lines = text.splitlines() if isinstance(text, str) else text
    records = []
    for line_no, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise ParseError(line_no, f"expected 4 columns, got {len(parts)}")
        frame = _as_int(parts[0], line_no, "frame")
        pid = _as_int(parts[1], line_no, "ped_id")
        try:
            x, y = float(parts[2]), float(parts[3])
        except ValueError:
            raise ParseError(line_no, "non-numeric coordinate") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ParseError(line_no, "non-finite coordinate")
        if frame < 0:
            raise ParseError(line_no, "negative frame id")
        records.append(RawRecord(frame, pid, x, y))
    return records


def parse_dataset(text: str | TextIO, name: str = "scene") -> Scene:
    """Parse a trajectory text stream into a :class:`Scene`.

    Interior gaps in a track are filled by linear interpolation.
    """
    if not isinstance(text, str):
        text = text.read()
    records = read_records(text)
    if not records:
        return Scene(name=name)
    seen: set[tuple[int, int]] = set()
    for r in records:
        key = (r.frame_id, r.ped_id)
        if key in seen:
            raise DataError(f"duplicate record for frame {r.frame_id}, ped {r.ped_id}")
        seen.add(key)

    frames = sorted({r.frame_id for r in records})
    origin = frames[0]
    stride = reduce(math.gcd, (b - a for a, b in zip(frames, frames[1:])), 0) or 1

    by_ped: dict[int, list[tuple[int, float, float]]] = {}
    for r in sorted(records, key=lambda r: (r.frame_id, r.ped_id)):
        by_ped.setdefault(r.ped_id, []).append(((r.frame_id - origin) // stride, r.x, r.y))

    tracks = {}
    for pid, rows in by_ped.items():
        ticks = np.array([t for t, _, _ in rows])
        xy = np.array([[x, y] for _, x, y in rows])
        full = np.arange(ticks[0], ticks[-1] + 1)
        if len(full) != len(ticks):
            xy = np.column_stack([np.interp(full, ticks, xy[:, 0]), np.interp(full, ticks, xy[:, 1])])
        tracks[pid] = Track(int(ticks[0]), xy)
    n_ticks = (frames[-1] - origin) // stride + 1
    return Scene(name=name, frame_origin=origin, frame_stride=stride, n_ticks=n_ticks, tracks=tracks)


def format_scene(scene: Scene) -> str:
    """Serialize back to the 4-column line format (frame-major order)."""
    rows = []
    for pid, tr in scene.tracks.items():
        for i, (x, y) in enumerate(tr.positions):
            tick = tr.start + i
            rows.append((tick, pid, float(x), float(y)))
    rows.sort()
    return "".join(
        f"{scene.frame_origin + t * scene.frame_stride} {pid} {x!r} {y!r}\n" for t, pid, x, y in rows
    )


@dataclass
class Window:
    scene: str
    t0: int
    node: int
    history: np.ndarray  # (8, 2)
    future: np.ndarray  # (12, 2)
    neighbors: dict[int, np.ndarray]  # ped_id -> (8, 2), NaN where unobserved
    n_present: int

    @property
    def last_tick(self) -> int:
        return self.t0 + HISTORY - 1

    def to_dict(self) -> dict:
        def rows(a):
            return [[None if math.isnan(v) else float(v) for v in p] for p in a]

        return {
            "scene": self.scene,
            "t0": self.t0,
            "node": self.node,
            "history": self.history.tolist(),
            "future": self.future.tolist(),
            "neighbors": {str(pid): rows(h) for pid, h in sorted(self.neighbors.items())},
            "n_present": self.n_present,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Window":
        def arr(rows):
            return np.array([[np.nan if v is None else v for v in p] for p in rows], dtype=float).reshape(-1, 2)

        return cls(d["scene"], int(d["t0"]), int(d["node"]), arr(d["history"]), arr(d["future"]),
                   {int(k): arr(v) for k, v in d["neighbors"].items()}, int(d["n_present"]))


def make_windows(scene: Scene, history: int = HISTORY, future: int = FUTURE) -> list[Window]:
    """Cut every (pedestrian, start tick) with a full history+future span.

    Neighbors are the other pedestrians observed at the last history tick with
    at least two observed history positions.
    """
    span = history + future
    counts = scene.headcount()
    present: dict[int, list[int]] = {}
    for pid, tr in sorted(scene.tracks.items()):
        for t in range(tr.start, tr.end + 1):
            present.setdefault(t, []).append(pid)
    out = []
    for pid, tr in sorted(scene.tracks.items()):
        for t0 in range(tr.start, tr.end - span + 2):
            last = t0 + history - 1
            nbrs = {}
            for other in present[last]:
                otr = scene.tracks[other]
                if other == pid or not otr.covers(last - 1):
                    continue
                h = np.full((history, 2), np.nan)
                lo = max(t0, otr.start)
                h[lo - t0 :] = otr.positions[lo - otr.start : last - otr.start + 1]
                nbrs[other] = h
            off = t0 - tr.start
            out.append(Window(
                scene.name, t0, pid,
                tr.positions[off : off + history].copy(),
                tr.positions[off + history : off + span].copy(),
                nbrs, int(counts[last]),
            ))
    out.sort(key=lambda w: (w.scene, w.t0, w.node))
    return out


def filter_univ_n(windows: list[Window], n: int) -> list[Window]:
    """Keep windows whose last history tick has at least ``n`` people present."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [w for w in windows if w.n_present >= n]


def relative_features(track: np.ndarray, origin: np.ndarray, dt: float = DT) -> np.ndarray:
    """(T, 2) positions, NaN for unobserved leading steps -> (T, 4) [rel pos, vel].

    Unobserved steps become zeros; the first observed step reuses the next
    step's velocity.
    """
    T = len(track)
    out = np.zeros((T, 4))
    obs = ~np.isnan(track[:, 0])
    if not obs.any():
        return out
    first = int(np.argmax(obs))
    rel = track[first:] - origin
    out[first:, :2] = rel
    if T - first >= 2:
        vel = np.diff(track[first:], axis=0) / dt
        out[first + 1 :, 2:] = vel
        out[first, 2:] = vel[0]
    return out


def to_relative(window: Window, dt: float = DT) -> tuple[list[int], np.ndarray]:
    """Node + neighbor features relative to the node's last history position.

    Returns node ids (current node first, then neighbors ascending) and an
    array of shape (n_nodes, 8, 4).
    """
    origin = window.history[-1]
    ids = [window.node] + sorted(window.neighbors)
    feats = [relative_features(window.history, origin, dt)]
    feats += [relative_features(window.neighbors[pid], origin, dt) for pid in ids[1:]]
    return ids, np.stack(feats)


def write_windows(path, windows: list[Window], header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for w in windows:
            fh.write(json.dumps(w.to_dict(), sort_keys=True) + "\n")


def read_windows(path) -> list[Window]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            if "header" in d:
                continue
            out.append(Window.from_dict(d))
    return out
