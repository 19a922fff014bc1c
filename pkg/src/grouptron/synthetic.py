"""Synthetic scenes: two 3-person groups on crossing, curving paths."""

from __future__ import annotations

import numpy as np

from .dataio import DT, Scene, Track

GROUP_SIZE = 3


def _arc(start: np.ndarray, heading: float, speed: float, omega: float, n: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Constant speed, constant turn rate. Returns centers (n, 2) and headings (n,)."""
    theta = heading + omega * dt * np.arange(n)
    steps = speed * dt * np.column_stack([np.cos(theta), np.sin(theta)])
    centers = start + np.vstack([[0.0, 0.0], np.cumsum(steps[:-1], axis=0)])
    return centers, theta


def crossing_groups_scene(rng: np.random.Generator, n_ticks: int = 24, noise: float = 0.05,
                          name: str = "synthetic", dt: float = DT) -> Scene:
    """Two groups approach a common crossing point from roughly perpendicular
    directions, curving in opposite senses at constant turn rates."""
    meet = rng.normal(0.0, 0.5, size=2)
    t_meet = n_ticks * dt * rng.uniform(0.35, 0.6)
    base = rng.uniform(0, 2 * np.pi)
    headings = [base, base + np.pi / 2 + rng.normal(0.0, 0.2)]
    tracks: dict[int, Track] = {}
    pid = 0
    for g, heading in enumerate(headings):
        speed = rng.uniform(1.1, 1.5)
        start = meet - speed * t_meet * np.array([np.cos(heading), np.sin(heading)])
        omega = rng.uniform(0.15, 0.3) * (-1.0 if g == 0 else 1.0)
        centers, theta = _arc(start, heading, speed, omega, n_ticks, dt)
        normal = np.column_stack([-np.sin(theta), np.cos(theta)])
        for slot in range(GROUP_SIZE):
            lateral = (slot - 1) * 0.7 + rng.normal(0.0, 0.05)
            pos = centers + lateral * normal + rng.normal(0.0, noise, size=centers.shape)
            tracks[pid] = Track(0, pos)
            pid += 1
    return Scene(name=name, dt=dt, frame_origin=0, frame_stride=10, n_ticks=n_ticks, tracks=tracks)


def crossing_corpus(n_scenes: int, seed: int, n_ticks: int = 24, noise: float = 0.05, prefix: str = "synth") -> list[Scene]:
    rng = np.random.default_rng(seed)
    return [crossing_groups_scene(rng, n_ticks, noise, name=f"{prefix}{i:03d}") for i in range(n_scenes)]
