"""Displacement metrics, evaluation protocols, reports and SVG plots."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .dataio import FUTURE, Window
from .grouping import GroupAssignment, agglomerate, cluster_count, distance_matrix
from .model import Grouptron, PredictionOutput

PROTOCOLS = ("most_likely", "best_of_20")


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 2 or len(p) == 0:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} must be equal-length (T, 2) arrays")
    return p, t


def step_errors(pred, truth) -> np.ndarray:
    p, t = _pair(pred, truth)
    return np.sqrt(((p - t) ** 2).sum(axis=1))


def fde(pred, truth) -> float:
    return float(step_errors(pred, truth)[-1])


def ade(pred, truth) -> float:
    return float(step_errors(pred, truth).mean())


def best_of_k(samples, truth) -> tuple[float, float]:
    """Minimum FDE over samples and the ADE of that sample (first one on ties)."""
    samples = list(samples)
    if not samples:
        raise ValueError("best_of_k needs at least one sample")
    fdes = [fde(s, truth) for s in samples]
    k = int(np.argmin(fdes))
    return fdes[k], ade(samples[k], truth)


def constant_velocity_baseline(window: Window, horizon: int = FUTURE) -> np.ndarray:
    hist = window.history
    if len(hist) < 2:
        raise ValueError("constant-velocity baseline needs two history points")
    step = hist[-1] - hist[-2]
    return hist[-1] + step * np.arange(1, horizon + 1)[:, None]


@dataclass
class ReportRow:
    protocol: str
    dataset: str
    fde: float
    ade: float
    n_windows: int


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    header: dict = field(default_factory=dict)

    def row(self, protocol: str, dataset: str) -> ReportRow:
        for r in self.rows:
            if r.protocol == protocol and r.dataset == dataset:
                return r
        raise KeyError((protocol, dataset))

    def to_json(self) -> str:
        return json.dumps({"header": self.header, "rows": [asdict(r) for r in self.rows]},
                          indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out / "report.json", out / "report.csv"
        jpath.write_text(self.to_json(), encoding="utf-8")
        with open(cpath, "w", newline="", encoding="utf-8") as fh:
            fh.write("# " + json.dumps(self.header, sort_keys=True) + "\n")
            w = csv.writer(fh)
            w.writerow(["protocol", "dataset", "fde", "ade", "n_windows"])
            for r in self.rows:
                w.writerow([r.protocol, r.dataset, repr(r.fde), repr(r.ade), r.n_windows])
        return jpath, cpath


def _aggregate(pairs: list[tuple[float, float]]) -> tuple[float, float]:
    # mean over windows in input order so the reduction is reproducible
    f = sum(p[0] for p in pairs) / len(pairs)
    a = sum(p[1] for p in pairs) / len(pairs)
    return f, a


def predict_all(model: Grouptron, windows: Sequence[Window], n_samples: int = 20,
                batch_size: int = 64) -> list[PredictionOutput]:
    n_samples = min(n_samples, model.cfg.latent_k)
    out: list[PredictionOutput] = []
    for lo in range(0, len(windows), batch_size):
        feats = [model.featurize(w) for w in windows[lo : lo + batch_size]]
        out.extend(model.predict_batch(feats, n_samples))
    return out


def evaluate(model: Grouptron, datasets: dict[str, Sequence[Window]], k: int = 20,
             include_baseline: bool = True, header: dict | None = None,
             predictor=None) -> EvalReport:
    """Score every dataset under most-likely and best-of-k, plus the baseline.

    ``predictor(windows, k)`` overrides :func:`predict_all`, e.g. to spread
    prediction over processes.
    """
    report = EvalReport(header=dict(header or {}))
    best_name = f"best_of_{k}"
    for name, windows in datasets.items():
        if not windows:
            continue
        preds = predictor(windows, k) if predictor else predict_all(model, windows, k)
        ml = [(fde(p.most_likely, w.future), ade(p.most_likely, w.future)) for p, w in zip(preds, windows)]
        bk = [best_of_k(p.samples, w.future) for p, w in zip(preds, windows)]
        report.rows.append(ReportRow("most_likely", name, *_aggregate(ml), len(windows)))
        report.rows.append(ReportRow(best_name, name, *_aggregate(bk), len(windows)))
        if include_baseline:
            cv = [(fde(constant_velocity_baseline(w), w.future), ade(constant_velocity_baseline(w), w.future))
                  for w in windows]
            report.rows.append(ReportRow("constant_velocity", name, *_aggregate(cv), len(windows)))
    return report


# ---------------------------------------------------------------- plots

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def tick_assignment(windows: Sequence[Window]) -> GroupAssignment:
    """Group the windows' current nodes by their histories."""
    ids = [w.node for w in windows]
    dm = distance_matrix([w.history for w in windows])
    return agglomerate(dm, cluster_count(len(ids)), ids)


def _polyline(points: np.ndarray, tx, style: str, cls: str, color: str) -> str:
    pts = " ".join(f"{x:.3f},{y:.3f}" for x, y in (tx(p) for p in points))
    return f'<polyline class="{cls}" points="{pts}" fill="none" stroke="{color}" {style}/>'


def render_svg(windows: Sequence[Window], predictions: Sequence[PredictionOutput],
               assignment: GroupAssignment, title: str = "", size: int = 480) -> str:
    pts = np.vstack([np.vstack([w.history, w.future, p.most_likely]) for w, p in zip(windows, predictions)])
    lo, hi = pts.min(axis=0) - 0.5, pts.max(axis=0) + 0.5
    scale = (size - 20) / max(float((hi - lo).max()), 1e-9)

    def tx(p):
        # flip y so north is up
        return 10 + (p[0] - lo[0]) * scale, size - 10 - (p[1] - lo[1]) * scale

    group_of = assignment.group_of
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f"<title>{escape(title)}</title>",
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for w, p in zip(windows, predictions):
        g = group_of.get(w.node, 0)
        color = PALETTE[g % len(PALETTE)]
        parts.append(f'<g id="ped-{w.node}" class="group-{g}">')
        parts.append(_polyline(w.history, tx, 'stroke-width="1.5" stroke-dasharray="4 3"', "history", "black"))
        parts.append(_polyline(np.vstack([w.history[-1:], w.future]), tx,
                               'stroke-width="1.5" stroke-dasharray="4 3"', "truth", "grey"))
        parts.append(_polyline(np.vstack([w.history[-1:], p.most_likely]), tx,
                               'stroke-width="2"', "prediction", color))
        cx, cy = tx(w.history[-1])
        parts.append(f'<circle cx="{cx:.3f}" cy="{cy:.3f}" r="3" fill="{color}"/>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_plots(windows: Sequence[Window], predictions: Sequence[PredictionOutput], path,
               assignments: dict[tuple[str, int], GroupAssignment] | None = None) -> list[Path]:
    """Write one SVG per (scene, last history tick)."""
    if len(windows) != len(predictions):
        raise ValueError("predictions must align with windows")
    if not windows:
        return []
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    by_tick: dict[tuple[str, int], list[int]] = {}
    for i, w in enumerate(windows):
        by_tick.setdefault((w.scene, w.last_tick), []).append(i)
    written = []
    for (scene, tick), idx in sorted(by_tick.items()):
        ws = [windows[i] for i in idx]
        ps = [predictions[i] for i in idx]
        asg = (assignments or {}).get((scene, tick)) or tick_assignment(ws)
        safe = re.sub(r"[^A-Za-z0-9_.-]", "_", scene)
        f = out / f"{safe}_t{tick:05d}.svg"
        f.write_text(render_svg(ws, ps, asg, title=f"{scene} tick {tick}"), encoding="utf-8")
        written.append(f)
    return written
