"""Spatio-temporal graphs at the individual, group and scene level."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import Window, to_relative
from .grouping import GroupAssignment

LEVELS = ("individual", "group", "scene")


@dataclass(frozen=True)
class PerceptionConfig:
    radius: float = 3.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("perception radius must be positive")


@dataclass
class STGraph:
    level: str
    node_ids: list[int]
    features: np.ndarray  # (N, T, F)
    adjacency: np.ndarray  # (T, N, N), zero diagonal

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown level {self.level!r}")
        n = len(self.node_ids)
        if self.features.shape[0] != n:
            raise ValueError("feature rows do not match node count")
        T = self.features.shape[1]
        if self.adjacency.shape != (T, n, n):
            raise ValueError(f"adjacency shape {self.adjacency.shape} != {(T, n, n)}")

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def to_json(self) -> dict:
        return {
            "level": self.level,
            "node_ids": list(self.node_ids),
            "features": np.asarray(self.features).tolist(),
            "adjacency": np.asarray(self.adjacency).tolist(),
        }


def build_individual(window: Window, cfg: PerceptionConfig = PerceptionConfig()) -> STGraph:
    """Directed edge i->j at tick t when both are observed and within ``cfg.radius``."""
    ids, feats = to_relative(window)
    tracks = np.stack([window.history] + [window.neighbors[pid] for pid in ids[1:]])  # (N, T, 2)
    diff = tracks[:, None, :, :] - tracks[None, :, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])  # (N, N, T), NaN where unobserved
    with np.errstate(invalid="ignore"):
        adj = (dist <= cfg.radius).astype(float)
    adj = np.transpose(adj, (2, 0, 1)).copy()
    n = len(ids)
    adj[:, np.arange(n), np.arange(n)] = 0.0
    return STGraph("individual", ids, feats, adj)


def complete_adjacency(n: int, T: int) -> np.ndarray:
    a = np.ones((T, n, n)) - np.eye(n)[None]
    return a


def build_group(window: Window, assignment: GroupAssignment) -> list[STGraph]:
    """One complete graph per group, features relative to the current node."""
    ids, feats = to_relative(window)
    row = {pid: k for k, pid in enumerate(ids)}
    T = feats.shape[1]
    graphs = []
    for members in assignment.groups:
        idx = [row[pid] for pid in members]
        graphs.append(STGraph("group", list(members), feats[idx], complete_adjacency(len(idx), T)))
    return graphs


def build_scene(group_embeddings) -> STGraph:
    """Scene graph whose nodes are groups; ``group_embeddings`` is (G, T, D)."""
    if len(group_embeddings) == 0:
        raise ValueError("scene graph needs at least one group")
    dims = {np.shape(e)[-1] for e in group_embeddings}
    lens = {np.shape(e)[0] for e in group_embeddings}
    if len(dims) != 1 or len(lens) != 1:
        raise ValueError("group embeddings must share length and dimension")
    feats = np.stack([np.asarray(e, dtype=float) for e in group_embeddings])
    G, T = feats.shape[:2]
    return STGraph("scene", list(range(G)), feats, complete_adjacency(G, T))


def normalize_adjacency(a) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree of A + I; works on (..., n, n)."""
    a = np.asarray(a, dtype=float)
    n = a.shape[-1]
    a_hat = a + np.eye(n)
    deg = a_hat.sum(axis=-1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return a_hat * inv_sqrt[..., :, None] * inv_sqrt[..., None, :]
