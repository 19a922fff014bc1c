"""Recurrent cells, STGCN block and pooling used by the multi-scale encoder."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensorcore as tc
from .stgraph import STGraph, normalize_adjacency
from .tensorcore import Tensor

NODE_HIDDEN = 32
EDGE_HIDDEN = 8
DECODER_HIDDEN = 128
TEMPORAL_KERNEL = 3


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return tc.parameter(rng.uniform(-bound, bound, size=shape))


class _Params:
    """Mixin: expose dataclass fields as a flat ``{prefix.name: Tensor}`` map."""

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}


@dataclass
class LinearParams(_Params):
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, in_dim: int, out_dim: int) -> "LinearParams":
        return cls(uniform_init(rng, (in_dim, out_dim), in_dim), uniform_init(rng, (out_dim,), in_dim))

    def __call__(self, x) -> Tensor:
        return tc.matmul(x, self.W) + self.b


@dataclass
class LstmParams(_Params):
    """Gate blocks along the last axis are ordered input, forget, candidate, output."""

    W: Tensor  # (in, 4H)
    U: Tensor  # (H, 4H)
    b: Tensor  # (4H,)

    @classmethod
    def init(cls, rng, input_dim: int, hidden_dim: int) -> "LstmParams":
        return cls(
            uniform_init(rng, (input_dim, 4 * hidden_dim), input_dim),
            uniform_init(rng, (hidden_dim, 4 * hidden_dim), hidden_dim),
            uniform_init(rng, (4 * hidden_dim,), hidden_dim),
        )

    @property
    def input_dim(self) -> int:
        return self.W.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[0]


def lstm_encode(params: LstmParams, seq) -> Tensor:
    """Run the LSTM from a zero state over ``seq`` (T, in) or (B, T, in); return the final hidden state."""
    seq = seq if isinstance(seq, Tensor) else Tensor(seq)
    squeeze = seq.ndim == 2
    if squeeze:
        seq = tc.reshape(seq, (1,) + seq.shape)
    if seq.ndim != 3 or seq.shape[-1] != params.input_dim:
        raise ValueError(f"lstm_encode: expected (..., T, {params.input_dim}) input, got {seq.shape}")
    B, T, _ = seq.shape
    H = params.hidden_dim
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    # the input projection does not depend on the state: do it for all steps at once
    xw = tc.matmul(seq, params.W) + params.b
    for t in range(T):
        gates = xw[:, t, :] + tc.matmul(h, params.U)
        i = tc.sigmoid(gates[:, :H])
        f = tc.sigmoid(gates[:, H : 2 * H])
        g = tc.tanh(gates[:, 2 * H : 3 * H])
        o = tc.sigmoid(gates[:, 3 * H :])
        c = f * c + i * g
        h = o * tc.tanh(c)
    return h[0] if squeeze else h


def neighbor_sum(neighbor_seqs) -> np.ndarray:
    """Step-wise sum over the leading neighbor axis, independent of neighbor order.

    Values are sorted along that axis first so the floating-point additions
    happen in the same order for any permutation.
    """
    arr = np.asarray(neighbor_seqs, dtype=float)
    if arr.ndim != 3:
        raise ValueError("expected (M, T, F) neighbor sequences")
    return np.sort(arr, axis=0).sum(axis=0)


def edge_encode(params: LstmParams, neighbor_seqs) -> Tensor:
    """Sum neighbor feature sequences step-wise, then encode with the edge LSTM.

    ``neighbor_seqs`` is (M, T, F); with M = 0 pass an array of shape (0, T, F).
    """
    return lstm_encode(params, neighbor_sum(neighbor_seqs))


@dataclass
class GruParams(_Params):
    """Gate blocks along the last axis are ordered reset, update, candidate."""

    W: Tensor  # (in, 3H)
    U: Tensor  # (H, 3H)
    b_x: Tensor  # (3H,)
    b_h: Tensor  # (3H,)

    @classmethod
    def init(cls, rng, input_dim: int, hidden_dim: int = DECODER_HIDDEN) -> "GruParams":
        return cls(
            uniform_init(rng, (input_dim, 3 * hidden_dim), input_dim),
            uniform_init(rng, (hidden_dim, 3 * hidden_dim), hidden_dim),
            uniform_init(rng, (3 * hidden_dim,), hidden_dim),
            uniform_init(rng, (3 * hidden_dim,), hidden_dim),
        )

    @property
    def input_dim(self) -> int:
        return self.W.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[0]


def gru_cell(params: GruParams, h: Tensor, x_proj: Tensor) -> Tensor:
    """GRU update given an already projected input ``x W + b_x`` of shape (B, 3H)."""
    H = params.hidden_dim
    hu = tc.matmul(h, params.U) + params.b_h
    r = tc.sigmoid(x_proj[:, :H] + hu[:, :H])
    z = tc.sigmoid(x_proj[:, H : 2 * H] + hu[:, H : 2 * H])
    n = tc.tanh(x_proj[:, 2 * H :] + r * hu[:, 2 * H :])
    return (1.0 - z) * n + z * h


def gru_decode_step(params: GruParams, h, x) -> Tensor:
    h = h if isinstance(h, Tensor) else Tensor(h)
    x = x if isinstance(x, Tensor) else Tensor(x)
    if h.shape[-1] != params.hidden_dim or x.shape[-1] != params.input_dim:
        raise ValueError(
            f"gru_decode_step: state {h.shape} / input {x.shape} vs dims {params.hidden_dim}/{params.input_dim}"
        )
    squeeze = h.ndim == 1
    if squeeze:
        h = tc.reshape(h, (1, -1))
        x = tc.reshape(x, (1, -1))
    out = gru_cell(params, h, tc.matmul(x, params.W) + params.b_x)
    return out[0] if squeeze else out


@dataclass
class StgcnParams(_Params):
    weight: Tensor  # (in, out) spatial projection
    kernel: Tensor  # (3, out, out) temporal filter
    bias: Tensor  # (out,)

    @classmethod
    def init(cls, rng, in_dim: int, out_dim: int, k: int = TEMPORAL_KERNEL) -> "StgcnParams":
        return cls(
            uniform_init(rng, (in_dim, out_dim), in_dim),
            uniform_init(rng, (k, out_dim, out_dim), k * out_dim),
            uniform_init(rng, (out_dim,), k * out_dim),
        )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def stgcn_apply(params: StgcnParams, x, a_hat) -> Tensor:
    """Time-major STGCN block: x (T, N, in), a_hat (N, N) or (T, N, N) -> (T, N, out).

    Per tick ``relu(A_t X_t W)``, then a same-padded temporal convolution.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 3 or x.shape[-1] != params.in_dim:
        raise ValueError(f"stgcn: expected (T, N, {params.in_dim}) features, got {x.shape}")
    a_hat = np.asarray(a_hat, dtype=float)
    if a_hat.shape[-1] != x.shape[1] or a_hat.shape[-2] != x.shape[1]:
        raise ValueError(f"stgcn: adjacency {a_hat.shape} does not match {x.shape[1]} nodes")
    spatial = tc.relu(tc.matmul(tc.matmul(Tensor(a_hat), x), params.weight))
    return tc.temporal_conv(spatial, params.kernel, params.bias)


def stgcn_forward(params: StgcnParams, g: STGraph, layers: list[StgcnParams] | None = None) -> Tensor:
    """Encode an :class:`STGraph`; returns per-node per-timestep embeddings (N, T, out).

    ``layers`` stacks further blocks after ``params`` on the same graph.
    """
    a_hat = normalize_adjacency(g.adjacency)
    feats = g.features if isinstance(g.features, Tensor) else Tensor(g.features)
    h = stgcn_apply(params, _node_to_time(feats), a_hat)
    for extra in layers or []:
        h = stgcn_apply(extra, h, a_hat)
    return _node_to_time(h)


def _node_to_time(x: Tensor) -> Tensor:
    # (N, T, F) <-> (T, N, F)
    return tc.transpose(x, (1, 0, 2))


def group_pool(embeddings) -> Tensor:
    """Mean over nodes: (N, T, D) -> (T, D)."""
    e = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    if e.shape[0] == 0:
        raise ValueError("group_pool needs at least one node")
    return tc.mean(e, axis=0)


def scene_select(scene_out, g: int) -> Tensor:
    """Embedding of group ``g`` at the final tick from (G, T, D) scene output."""
    s = scene_out if isinstance(scene_out, Tensor) else Tensor(scene_out)
    if not 0 <= g < s.shape[0]:
        raise ValueError(f"group index {g} out of range for {s.shape[0]} groups")
    return s[g, -1, :]
