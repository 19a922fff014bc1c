"""Pedestrian group detection and grouping quality.

Trajectories are compared with the (symmetric) Hausdorff distance between
their point sets, then merged bottom-up with complete linkage until
``cluster_count(n)`` groups remain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataio import HISTORY, Scene, Window

LINKAGES = ("complete", "single", "average")


@dataclass(frozen=True)
class GroupAssignment:
    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen: set[int] = set()
        for g in self.groups:
            if not g:
                raise ValueError("empty group")
            if seen & set(g):
                raise ValueError("groups overlap")
            seen |= set(g)

    @property
    def group_of(self) -> dict[int, int]:
        return {pid: gi for gi, g in enumerate(self.groups) for pid in g}

    @property
    def ids(self) -> frozenset[int]:
        return frozenset(pid for g in self.groups for pid in g)

    def as_sets(self) -> set[frozenset[int]]:
        return {frozenset(g) for g in self.groups}

    def to_json(self) -> list[list[int]]:
        return [list(g) for g in self.groups]


@dataclass
class DistanceMatrix:
    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError("distance matrix must be square")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("distances must be finite and nonnegative")
        if not np.array_equal(d, d.T) or np.any(np.diag(d) != 0):
            raise ValueError("distance matrix must be symmetric with zero diagonal")
        self.d = d

    @property
    def n(self) -> int:
        return self.d.shape[0]


def hausdorff(a, b) -> float:
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("hausdorff needs non-empty point sequences")
    diff = a[:, None, :] - b[None, :, :]
    d = np.hypot(diff[..., 0], diff[..., 1])  # no underflow for tiny offsets
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def distance_matrix(trajectories: Sequence[np.ndarray]) -> DistanceMatrix:
    n = len(trajectories)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = hausdorff(trajectories[i], trajectories[j])
    return DistanceMatrix(d)


def cluster_count(n: int) -> int:
    """Number of groups for ``n`` pedestrians: floor((n + 1) / 2)."""
    if n < 1:
        raise ValueError("cluster_count needs n >= 1")
    return (n + 1) // 2


def agglomerate(dm: DistanceMatrix, c: int, ids: Sequence[int] | None = None,
                linkage: str = "complete") -> GroupAssignment:
    """Bottom-up merge until ``c`` clusters remain.

    Clusters are kept ordered by their smallest member index; on equal linkage
    distances the lexicographically smallest (i, j) cluster pair merges first.
    """
    n = dm.n
    if not 1 <= c <= n:
        raise ValueError(f"cluster count {c} outside [1, {n}]")
    if linkage not in LINKAGES:
        raise ValueError(f"unknown linkage {linkage!r}")
    ids = list(range(n)) if ids is None else list(ids)
    if len(ids) != n:
        raise ValueError("ids length does not match distance matrix")

    clusters = [[i] for i in range(n)]
    link = dm.d.copy()
    while len(clusters) > c:
        m = len(clusters)
        iu, ju = np.triu_indices(m, k=1)
        # argmin returns the first minimum, i.e. smallest (i, j) in row-major order
        k = int(np.argmin(link[iu, ju]))
        i, j = int(iu[k]), int(ju[k])
        if linkage == "complete":
            merged = np.maximum(link[i], link[j])
        elif linkage == "single":
            merged = np.minimum(link[i], link[j])
        else:
            ni, nj = len(clusters[i]), len(clusters[j])
            merged = (ni * link[i] + nj * link[j]) / (ni + nj)
        link[i, :] = merged
        link[:, i] = merged
        link[i, i] = 0.0
        link = np.delete(np.delete(link, j, axis=0), j, axis=1)
        clusters[i] = sorted(clusters[i] + clusters[j])
        del clusters[j]
    return GroupAssignment(tuple(tuple(ids[k] for k in cl) for cl in clusters))


def scope_nodes(window: Window, graph) -> set[int]:
    """Current node plus every node with an edge to or from it at any tick."""
    node_idx = graph.node_ids.index(window.node)
    adj = np.asarray(graph.adjacency)
    linked = (adj[:, node_idx, :] > 0).any(axis=0) | (adj[:, :, node_idx] > 0).any(axis=0)
    return {window.node} | {pid for k, pid in enumerate(graph.node_ids) if linked[k]}


def _observed(h: np.ndarray) -> np.ndarray:
    return h[~np.isnan(h[:, 0])]


def cluster_window(window: Window, graph, linkage: str = "complete") -> GroupAssignment:
    """Group the scoped nodes of one window using their history tracks."""
    scoped = scope_nodes(window, graph)
    ids = [pid for pid in graph.node_ids if pid in scoped]
    tracks = [window.history if pid == window.node else _observed(window.neighbors[pid]) for pid in ids]
    dm = distance_matrix(tracks)
    return agglomerate(dm, cluster_count(len(ids)), ids, linkage)


def cluster_tick(scene: Scene, tick: int, history: int = HISTORY, linkage: str = "complete") -> GroupAssignment:
    """Group every pedestrian present at ``tick`` by their last ``history`` positions."""
    ids = scene.present_at(tick)
    if not ids:
        return GroupAssignment(())
    tracks = []
    for pid in ids:
        tr = scene.tracks[pid]
        lo = max(tr.start, tick - history + 1)
        tracks.append(tr.positions[lo - tr.start : tick - tr.start + 1])
    return agglomerate(distance_matrix(tracks), cluster_count(len(ids)), ids, linkage)


def _as_assignment(x) -> GroupAssignment:
    if isinstance(x, GroupAssignment):
        return x
    return GroupAssignment(tuple(tuple(int(p) for p in g) for g in x))


def dice(algo: Sequence, human: Sequence[Sequence]) -> float:
    """Average Sørensen-Dice coefficient between algorithm and human groupings.

    ``algo[t]`` is the algorithm's grouping at timestep t, ``human[t][h]`` the
    grouping by annotator h. Two groups count as shared only if they hold
    exactly the same pedestrians.
    """
    if len(algo) != len(human):
        raise ValueError(f"{len(algo)} algorithm timesteps vs {len(human)} annotated")
    if not algo:
        raise ValueError("dice needs at least one timestep")
    per_t = []
    for t, (a, hs) in enumerate(zip(algo, human)):
        a = _as_assignment(a)
        if not hs:
            raise ValueError(f"timestep {t} has no annotators")
        scores = []
        for h in hs:
            h = _as_assignment(h)
            if h.ids != a.ids:
                raise ValueError(f"timestep {t}: annotation covers a different id set")
            shared = len(a.as_sets() & h.as_sets())
            scores.append(2.0 * shared / (len(a.groups) + len(h.groups)))
        per_t.append(sum(scores) / len(scores))
    return sum(per_t) / len(per_t)


def load_annotations(path) -> list[list[list[list[int]]]]:
    """Annotation JSON: timesteps -> annotators -> groups -> ped ids."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError("annotation file must hold a JSON list of timesteps")
    return data
