"""Multi-scale encoder, discrete-latent CVAE and GRU decoder.

A window is reduced once to a :class:`WindowFeatures` record (graphs,
clustering and relative features are all parameter-free). Batches of
records are then encoded together: every group graph of every window goes
into one block-diagonal graph so a single STGCN call covers the batch.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.linalg import block_diag

from . import tensorcore as tc
from .dataio import DT, FUTURE, Window, relative_features
from .grouping import GroupAssignment, cluster_window, scope_nodes
from .nets import (
    DECODER_HIDDEN,
    EDGE_HIDDEN,
    NODE_HIDDEN,
    GruParams,
    LinearParams,
    LstmParams,
    StgcnParams,
    gru_cell,
    lstm_encode,
    neighbor_sum,
    stgcn_apply,
)
from .stgraph import PerceptionConfig, build_group, build_individual, complete_adjacency, normalize_adjacency
from .tensorcore import Tensor

FEATURE_DIM = 4
LOG_2PI = float(np.log(2.0 * np.pi))


class ModelStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    scene_dim: int = 16
    latent_k: int = 25
    alpha: float = 1.0
    beta: float = 1.0
    radius: float = 3.0
    sigma: float = 0.1
    stgcn_layers: int = 1
    latent_hidden: int = 32
    linkage: str = "complete"
    dt: float = DT

    def __post_init__(self):
        if self.latent_k < 2:
            raise ValueError("latent_k must be >= 2")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.sigma <= 0 or self.radius <= 0 or self.stgcn_layers < 1:
            raise ValueError("sigma, radius and stgcn_layers must be positive")

    @property
    def embed_dim(self) -> int:
        return NODE_HIDDEN + EDGE_HIDDEN + self.scene_dim

    def with_eth(self) -> "ModelConfig":
        return replace(self, scene_dim=8)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")


@dataclass
class MultiScaleEmbedding:
    e_his: np.ndarray
    e_edge: np.ndarray
    e_scene: np.ndarray

    @property
    def e_multi(self) -> np.ndarray:
        return np.concatenate([self.e_his, self.e_edge, self.e_scene])


@dataclass
class PredictionOutput:
    most_likely: np.ndarray  # (12, 2)
    samples: np.ndarray  # (K, 12, 2)
    log_weights: np.ndarray  # (K,), nonincreasing
    categories: np.ndarray  # (K,) latent category of each sample

    def to_dict(self) -> dict:
        return {
            "most_likely": self.most_likely.tolist(),
            "samples": self.samples.tolist(),
            "log_weights": self.log_weights.tolist(),
            "categories": self.categories.tolist(),
        }


@dataclass
class WindowFeatures:
    """Everything the network needs from one window, computed without parameters."""

    window: Window
    hist: np.ndarray  # (8, 4) current node
    edge_in: np.ndarray  # (8, 4) step-wise sum over connected neighbors
    future: np.ndarray  # (12, 4) ground truth, same encoding as the history
    target: np.ndarray  # (12, 2) future positions relative to the last observed one
    last_pos: np.ndarray
    last_vel: np.ndarray
    assignment: GroupAssignment
    group_x: np.ndarray  # (T, n, 4) scoped nodes ordered group by group
    group_sizes: list[int] = field(default_factory=list)
    node_group: int = 0


def featurize(window: Window, cfg: ModelConfig) -> WindowFeatures:
    graph = build_individual(window, PerceptionConfig(cfg.radius))
    scoped = scope_nodes(window, graph)
    nbr_rows = [k for k, pid in enumerate(graph.node_ids) if pid in scoped and pid != window.node]
    feats = graph.features
    edge_in = neighbor_sum(feats[nbr_rows]) if nbr_rows else np.zeros_like(feats[0])

    assignment = cluster_window(window, graph, cfg.linkage)
    groups = build_group(window, assignment)
    group_x = np.concatenate([g.features for g in groups], axis=0).transpose(1, 0, 2)

    last = window.history[-1]
    fut = relative_features(np.vstack([window.history[-1:], window.future]), last, cfg.dt)[1:]
    return WindowFeatures(
        window=window,
        hist=feats[0],
        edge_in=edge_in,
        future=fut,
        target=window.future - last,
        last_pos=last.copy(),
        last_vel=(window.history[-1] - window.history[-2]) / cfg.dt,
        assignment=assignment,
        group_x=group_x,
        group_sizes=[len(g) for g in assignment.groups],
        node_group=assignment.group_of[window.node],
    )


@dataclass
class Batch:
    hist: np.ndarray
    edge_in: np.ndarray
    future: np.ndarray
    target: np.ndarray
    last_pos: np.ndarray
    last_vel: np.ndarray
    group_x: np.ndarray  # (T, N_total, 4)
    group_adj: np.ndarray  # (N_total, N_total), normalized, block diagonal
    pool: np.ndarray  # (G_total, N_total) group averaging
    scene_adj: np.ndarray  # (G_total, G_total), normalized, block diagonal
    select: np.ndarray  # (B,) row of each window's own group in G_total

    @property
    def size(self) -> int:
        return len(self.hist)


def collate(items: list[WindowFeatures]) -> Batch:
    group_blocks, scene_blocks, pool_rows, select = [], [], [], []
    n_off = g_off = 0
    n_total = sum(sum(f.group_sizes) for f in items)
    for f in items:
        for size in f.group_sizes:
            group_blocks.append(normalize_adjacency(complete_adjacency(size, 1)[0]))
            row = np.zeros(n_total)
            row[n_off : n_off + size] = 1.0 / size
            pool_rows.append(row)
            n_off += size
        G = len(f.group_sizes)
        scene_blocks.append(normalize_adjacency(complete_adjacency(G, 1)[0]))
        select.append(g_off + f.node_group)
        g_off += G
    return Batch(
        hist=np.stack([f.hist for f in items]),
        edge_in=np.stack([f.edge_in for f in items]),
        future=np.stack([f.future for f in items]),
        target=np.stack([f.target for f in items]),
        last_pos=np.stack([f.last_pos for f in items]),
        last_vel=np.stack([f.last_vel for f in items]),
        group_x=np.concatenate([f.group_x for f in items], axis=1),
        group_adj=block_diag(*group_blocks),
        pool=np.stack(pool_rows),
        scene_adj=block_diag(*scene_blocks),
        select=np.array(select),
    )


def integrate_controls(last_pos: np.ndarray, controls: np.ndarray, dt: float = DT) -> np.ndarray:
    """Single integrator: s_{t+1} = s_t + u_t dt starting from ``last_pos``."""
    return last_pos + np.cumsum(controls * dt, axis=-2)


class Grouptron:
    """Parameter container plus forward passes.

    Build with :meth:`initialize` (random weights) or :meth:`from_arrays`
    (checkpoint). A bare ``Grouptron(cfg)`` holds no parameters and refuses to
    predict.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.modules: dict[str, object] | None = None

    # ------------------------------------------------------------ parameters

    @classmethod
    def initialize(cls, cfg: ModelConfig = ModelConfig(), seed: int = 0) -> "Grouptron":
        rng = np.random.default_rng(seed)
        E, K, D, Hl = cfg.embed_dim, cfg.latent_k, cfg.scene_dim, cfg.latent_hidden
        m: dict[str, object] = {
            "node_lstm": LstmParams.init(rng, FEATURE_DIM, NODE_HIDDEN),
            "edge_lstm": LstmParams.init(rng, FEATURE_DIM, EDGE_HIDDEN),
            "future_lstm": LstmParams.init(rng, FEATURE_DIM, NODE_HIDDEN),
        }
        for lvl, first_in in (("group_stgcn", FEATURE_DIM), ("scene_stgcn", D)):
            for i in range(cfg.stgcn_layers):
                m[f"{lvl}.{i}"] = StgcnParams.init(rng, first_in if i == 0 else D, D)
        m["prior_net.hidden"] = LinearParams.init(rng, E, Hl)
        m["prior_net.out"] = LinearParams.init(rng, Hl, K)
        m["posterior_net.hidden"] = LinearParams.init(rng, E + NODE_HIDDEN, Hl)
        m["posterior_net.out"] = LinearParams.init(rng, Hl, K)
        m["decoder_gru"] = GruParams.init(rng, E + K + 2, DECODER_HIDDEN)
        m["decoder_gru.h0"] = LinearParams.init(rng, E + K, DECODER_HIDDEN)
        m["decoder_gru.head"] = LinearParams.init(rng, DECODER_HIDDEN, 2)
        model = cls(cfg)
        model.modules = m
        return model

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> "Grouptron":
        model = cls.initialize(cfg, seed=0)
        params = model.parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ModelStateError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
        for name, t in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ModelStateError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.copy()
        return model

    def parameters(self) -> dict[str, Tensor]:
        if self.modules is None:
            raise ModelStateError("model has no parameters; initialize or load a checkpoint")
        out: dict[str, Tensor] = {}
        for prefix, mod in self.modules.items():
            out.update(mod.named(prefix))
        return out

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def _m(self, name: str):
        if self.modules is None:
            raise ModelStateError("model has no parameters; initialize or load a checkpoint")
        return self.modules[name]

    # ------------------------------------------------------------ encoder

    def featurize(self, window: Window) -> WindowFeatures:
        return featurize(window, self.cfg)

    def _encode(self, b: Batch) -> tuple[Tensor, Tensor, Tensor]:
        e_his = lstm_encode(self._m("node_lstm"), b.hist)
        e_edge = lstm_encode(self._m("edge_lstm"), b.edge_in)
        h = Tensor(b.group_x)
        for i in range(self.cfg.stgcn_layers):
            h = stgcn_apply(self._m(f"group_stgcn.{i}"), h, b.group_adj)
        s = tc.matmul(Tensor(b.pool), h)  # (T, G_total, D): per-group mean of node embeddings
        for i in range(self.cfg.stgcn_layers):
            s = stgcn_apply(self._m(f"scene_stgcn.{i}"), s, b.scene_adj)
        e_scene = s[-1, b.select, :]
        return e_his, e_edge, e_scene

    def encode_batch(self, b: Batch) -> Tensor:
        return tc.concat(self._encode(b), axis=-1)

    def group_embeddings(self, feats: WindowFeatures) -> np.ndarray:
        """Pooled group-level STGCN outputs for one window, shape (G, T, scene_dim)."""
        b = collate([feats])
        with tc.no_grad():
            h = Tensor(b.group_x)
            for i in range(self.cfg.stgcn_layers):
                h = stgcn_apply(self._m(f"group_stgcn.{i}"), h, b.group_adj)
            s = tc.matmul(Tensor(b.pool), h)
        return np.transpose(s.data, (1, 0, 2)).copy()

    def encode(self, window: Window) -> MultiScaleEmbedding:
        with tc.no_grad():
            parts = self._encode(collate([self.featurize(window)]))
        e_his, e_edge, e_scene = (p.data[0].copy() for p in parts)
        return MultiScaleEmbedding(e_his, e_edge, e_scene)

    def prior_logits(self, e: Tensor) -> Tensor:
        return self._m("prior_net.out")(tc.tanh(self._m("prior_net.hidden")(e)))

    def posterior_logits(self, e: Tensor, b: Batch) -> Tensor:
        e_fut = lstm_encode(self._m("future_lstm"), b.future)
        x = tc.concat([e, e_fut], axis=-1)
        return self._m("posterior_net.out")(tc.tanh(self._m("posterior_net.hidden")(x)))

    # ------------------------------------------------------------ decoder

    def _decode_rows(self, e: Tensor, rows: np.ndarray, z: np.ndarray, u0: np.ndarray) -> tuple[Tensor, Tensor]:
        """Unroll the GRU for rows ``e[rows]`` with latent codes ``z`` (R, K).

        Returns positions relative to the last observation and the controls,
        both (R, 12, 2).
        """
        E, K = self.cfg.embed_dim, self.cfg.latent_k
        gru = self._m("decoder_gru")
        h0 = self._m("decoder_gru.h0")
        head = self._m("decoder_gru.head")
        if z.shape != (len(rows), K):
            raise ValueError(f"latent codes must be ({len(rows)}, {K}), got {z.shape}")
        zt = Tensor(z)
        # input is [e; z; u_prev]; the e and z blocks are constant over the unroll
        static = (tc.matmul(e, gru.W[:E])[rows] + tc.matmul(zt, gru.W[E : E + K])) + gru.b_x
        w_u = gru.W[E + K :]
        h = tc.tanh(tc.matmul(e, h0.W[:E])[rows] + tc.matmul(zt, h0.W[E:]) + h0.b)
        u = Tensor(u0)
        pos = Tensor(np.zeros((len(rows), 2)))
        positions, controls = [], []
        for _ in range(FUTURE):
            h = gru_cell(gru, h, static + tc.matmul(u, w_u))
            u = head(h)
            pos = pos + u * self.cfg.dt
            positions.append(pos)
            controls.append(u)
        return tc.stack(positions, axis=1), tc.stack(controls, axis=1)

    def decode(self, e_multi, z, last_pos, last_vel) -> tuple[np.ndarray, np.ndarray]:
        """Decode one embedding with latent code ``z`` (one-hot or distribution).

        Returns absolute positions (12, 2) and controls (12, 2).
        """
        e = Tensor(np.asarray(e_multi, dtype=float).reshape(1, -1))
        if e.shape[1] != self.cfg.embed_dim:
            raise ValueError(f"embedding length {e.shape[1]} != {self.cfg.embed_dim}")
        with tc.no_grad():
            rel, u = self._decode_rows(e, np.array([0]), np.asarray(z, dtype=float).reshape(1, -1),
                                       np.asarray(last_vel, dtype=float).reshape(1, 2))
        return np.asarray(last_pos) + rel.data[0], u.data[0]

    # ------------------------------------------------------------ objective

    def loss_terms(self, b: Batch, loss_cfg: LossConfig | None = None) -> dict[str, Tensor]:
        """Negated CVAE objective for a batch plus its components.

        ``loss = mean_i(-E_q[log p(y|x,z)] + beta KL(q || p)) - alpha I_q``.
        The expectation is exact over all latent categories. ``I_q`` is the
        entropy of the batch-averaged prior minus the mean prior entropy.
        """
        lc = loss_cfg or LossConfig(self.cfg.alpha, self.cfg.beta)
        B, K = b.size, self.cfg.latent_k
        if lc.alpha > 0 and B < 2:
            raise ValueError("mutual-information term needs a batch of at least 2 windows")
        e = self.encode_batch(b)
        logits_p = self.prior_logits(e)
        logits_q = self.posterior_logits(e, b)

        rows = np.repeat(np.arange(B), K)
        z = np.tile(np.eye(K), (B, 1))
        rel, _ = self._decode_rows(e, rows, z, b.last_vel[rows])
        resid = tc.reshape(rel - b.target[rows], (B * K, -1)) * (1.0 / self.cfg.sigma)
        n_dims = resid.shape[1]
        const = n_dims * (np.log(self.cfg.sigma) + 0.5 * LOG_2PI)
        log_lik = tc.reshape(tc.sum_(resid * resid, axis=1) * -0.5 - const, (B, K))

        log_q = tc.log_softmax(logits_q)
        q = tc.softmax(logits_q)
        log_p = tc.log_softmax(logits_p)
        exp_ll = tc.sum_(q * log_lik, axis=1)
        kl = tc.sum_(q * (log_q - log_p), axis=1)
        per_window = tc.mean(kl * lc.beta - exp_ll)
        terms = {"exp_ll": tc.mean(exp_ll), "kl": tc.mean(kl)}
        if lc.alpha > 0:
            p = tc.softmax(logits_p)
            marginal = tc.mean(p, axis=0)
            h_marginal = -tc.sum_(marginal * tc.log(marginal))
            h_cond = -tc.mean(tc.sum_(p * log_p, axis=1))
            mi = h_marginal - h_cond
            terms["mi"] = mi
            terms["loss"] = per_window - mi * lc.alpha
        else:
            terms["mi"] = Tensor(0.0)
            terms["loss"] = per_window
        return terms

    def loss(self, items: list[WindowFeatures] | Batch, loss_cfg: LossConfig | None = None) -> Tensor:
        b = items if isinstance(items, Batch) else collate(items)
        return self.loss_terms(b, loss_cfg)["loss"]

    # ------------------------------------------------------------ inference

    def predict_batch(self, items: list[WindowFeatures], n_samples: int = 0) -> list[PredictionOutput]:
        """Most-likely trajectory (argmax prior category, lowest index on ties)
        plus the ``n_samples`` highest-prior categories decoded in order."""
        if self.modules is None:
            raise ModelStateError("model has no parameters; initialize or load a checkpoint")
        K = self.cfg.latent_k
        if not 0 <= n_samples <= K:
            raise ValueError(f"n_samples must be in [0, {K}]")
        if not items:
            return []
        b = collate(items)
        with tc.no_grad():
            e = self.encode_batch(b)
            log_p = tc.log_softmax(self.prior_logits(e)).data
            order = np.argsort(-log_p, axis=1, kind="stable")
            n_dec = max(1, n_samples)
            cats = order[:, :n_dec]  # column 0 is the argmax, first index on ties
            rows = np.repeat(np.arange(b.size), n_dec)
            z = np.eye(K)[cats.reshape(-1)]
            rel, _ = self._decode_rows(e, rows, z, b.last_vel[rows])
        traj = rel.data.reshape(b.size, n_dec, FUTURE, 2) + b.last_pos[:, None, None, :]
        out = []
        for i in range(b.size):
            k = n_samples
            out.append(PredictionOutput(
                most_likely=traj[i, 0].copy(),
                samples=traj[i, :k].copy(),
                log_weights=log_p[i, cats[i, :k]].copy(),
                categories=cats[i, :k].copy(),
            ))
        return out

    def predict(self, window: Window, mode: str = "most_likely", k: int = 20) -> PredictionOutput:
        if mode == "most_likely":
            return self.predict_batch([self.featurize(window)], 0)[0]
        if mode == "sample_k":
            return self.predict_batch([self.featurize(window)], k)[0]
        raise ValueError(f"unknown prediction mode {mode!r}")
