"""Mini-batch training: Adam, per-epoch exponential decay, global-norm clipping."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .model import Grouptron, WindowFeatures, collate
from .tensorcore import Tensor

log = logging.getLogger(__name__)

PAPER_BATCH_SIZE = 256
DESK_BATCH_SIZE = 32


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int | None = None  # None: 256, or 32 when there are fewer than 256 windows
    lr0: float = 1e-3
    decay: float = 0.9999
    clip: float = 1.0
    clip_mode: str = "global_norm"  # or "value": clamp each entry to [-clip, clip]
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr0 <= 0 or self.clip <= 0:
            raise ValueError("lr0 and clip must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.clip_mode not in ("global_norm", "value"):
            raise ValueError(f"unknown clip_mode {self.clip_mode!r}")

    def resolved_batch_size(self, n_windows: int) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return PAPER_BATCH_SIZE if n_windows >= PAPER_BATCH_SIZE else DESK_BATCH_SIZE

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.decay ** epoch

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: dict[str, Tensor], lr: float) -> None:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def global_norm(params) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def clip_global_norm(params, max_norm: float = 1.0) -> float:
    """Scale all gradients by max_norm / norm when the global L2 norm exceeds max_norm.

    Returns the scale that was applied (1.0 when untouched).
    """
    params = list(params)
    norm = global_norm(params)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * scale
    return scale


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    lr: float
    wall_time_s: float


@dataclass
class TrainResult:
    history: list[EpochMetrics]
    steps: int


def batch_bounds(n: int, bs: int) -> list[tuple[int, int]]:
    """Consecutive [lo, hi) slices of size ``bs``; a lone trailing window joins
    the previous batch because the mutual-information term needs two."""
    bounds = [(lo, min(lo + bs, n)) for lo in range(0, n, bs)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        bounds[-2:] = [(bounds[-2][0], n)]
    return bounds


def _dump_batch(path: Path | None, epoch: int, items: list[WindowFeatures], err: Exception) -> None:
    if path is None:
        return
    record = {
        "epoch": epoch,
        "error": str(err),
        "windows": [{"scene": f.window.scene, "node": f.window.node, "t0": f.window.t0} for f in items],
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True))


def train(model: Grouptron, items: list[WindowFeatures], cfg: TrainConfig,
          metrics_path: str | Path | None = None, dump_path: str | Path | None = None,
          header: dict | None = None) -> TrainResult:
    """Train ``model`` in place on pre-featurized windows.

    Each epoch reshuffles with a generator seeded from ``cfg.seed``; each
    batch zeroes grads, backpropagates the mean loss, clips and takes an Adam
    step at ``lr0 * decay**epoch``.
    """
    if not items:
        raise ValueError("train needs at least one window")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    adam = AdamState()
    bs = cfg.resolved_batch_size(len(items))
    dump = Path(dump_path) if dump_path is not None else None
    history: list[EpochMetrics] = []
    steps = 0
    for epoch in range(cfg.epochs):
        t_start = time.perf_counter()
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(items))
        losses, weights = [], []
        for lo, hi in batch_bounds(len(items), bs):
            batch = [items[i] for i in order[lo:hi]]
            model.zero_grad()
            try:
                loss = model.loss(collate(batch))
            except tc.NumericError as err:
                _dump_batch(dump, epoch, batch, err)
                raise TrainingDiverged(f"epoch {epoch}: {err}") from err
            if not np.isfinite(loss.item()):
                _dump_batch(dump, epoch, batch, FloatingPointError("non-finite loss"))
                raise TrainingDiverged(f"epoch {epoch}: non-finite loss")
            tc.backward(loss)
            if cfg.clip_mode == "global_norm":
                clip_global_norm(params.values(), cfg.clip)
            else:
                for p in params.values():
                    if p.grad is not None:
                        p.grad = np.clip(p.grad, -cfg.clip, cfg.clip)
            adam.update(params, lr)
            steps += 1
            losses.append(loss.item())
            weights.append(len(batch))
        mean_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
        history.append(EpochMetrics(epoch, mean_loss, lr, time.perf_counter() - t_start))
        log.info("epoch %d  loss %.4f  lr %.6g", epoch, mean_loss, lr)
    if metrics_path is not None:
        write_metrics(metrics_path, history, header)
    return TrainResult(history, steps)


def write_metrics(path, history: list[EpochMetrics], header: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header is not None:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "lr", "wall_time_s"])
        for m in history:
            w.writerow([m.epoch, repr(m.mean_loss), repr(m.lr), f"{m.wall_time_s:.3f}"])
