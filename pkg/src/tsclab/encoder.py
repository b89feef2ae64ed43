"""Hierarchical graph-attention encoder: segments -> movements -> phases -> phases.

Every level uses dynamic attention scores ``a . leaky(W x + ...)``, multi-head
aggregation with per-head width ``d' / H``, concatenation of the heads, a
linear merge back to ``d'`` and a residual embedding perceptron.

A batch of state graphs is encoded as one disjoint union, so a single forward
pass serves a whole replay minibatch or every intersection of a network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .encoding import StateGraph

N_HEADS = 8
D_LATENT = 64
LEAKY_SLOPE = 0.01
DROPOUT = 0.1
# densities (vehicles per metre) enter the first layer as occupancies: one
# vehicle per jam spacing maps to 1, the same order as the positional codes
DENSITY_SCALE = 7.5


@dataclass
class GraphBatch:
    """Disjoint union of state graphs with global index arrays.

    Level-2 edges are the complete bipartite movement x phase product of each
    graph, sorted by phase; level-3 edges are all ordered phase pairs of each
    graph (self-pairs included), sorted by receiving phase.
    """

    n_graphs: int
    seg_feat: np.ndarray
    seg_lane: np.ndarray
    n_lanes: int
    move_in: np.ndarray
    move_out: np.ndarray
    move_graph: np.ndarray
    edge_move: np.ndarray
    edge_phase: np.ndarray
    edge_gamma: np.ndarray
    phase_flag: np.ndarray
    phase_graph: np.ndarray
    pair_recv: np.ndarray
    pair_send: np.ndarray
    pair_jacc: np.ndarray
    phase_offsets: np.ndarray

    @property
    def n_moves(self) -> int:
        return len(self.move_in)

    @property
    def n_phases(self) -> int:
        return len(self.phase_flag)

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        """Cut a per-phase array back into one piece per graph."""
        return np.split(values, self.phase_offsets[1:-1])

    @classmethod
    def from_graphs(cls, graphs: list[StateGraph]) -> "GraphBatch":
        if not graphs:
            raise ValueError("cannot batch an empty list of graphs")
        feats, seg_lane, move_in, move_out, move_graph = [], [], [], [], []
        e_m, e_p, e_g, flags, phase_graph = [], [], [], [], []
        p_r, p_s, p_j = [], [], []
        lane0 = move0 = phase0 = 0
        offsets = [0]
        for gi, g in enumerate(graphs):
            nm, npz = g.n_movements, g.n_phases
            feats.append(g.seg_feat)
            seg_lane.append(g.seg_lane + lane0)
            move_in.append(g.move_in + lane0)
            move_out.append(g.move_out + lane0)
            move_graph.append(np.full(nm, gi))
            e_m.append(np.tile(np.arange(move0, move0 + nm), npz))
            e_p.append(np.repeat(np.arange(phase0, phase0 + npz), nm))
            e_g.append(g.gamma.T.ravel())
            flags.append(g.phase_flag)
            phase_graph.append(np.full(npz, gi))
            p_r.append(np.repeat(np.arange(phase0, phase0 + npz), npz))
            p_s.append(np.tile(np.arange(phase0, phase0 + npz), npz))
            p_j.append(g.jacc.ravel())
            lane0 += len(g.lane_ids)
            move0 += nm
            phase0 += npz
            offsets.append(phase0)
        cat = np.concatenate
        i64 = np.int64
        return cls(
            n_graphs=len(graphs),
            seg_feat=cat(feats).astype(np.float64),
            seg_lane=cat(seg_lane).astype(i64),
            n_lanes=lane0,
            move_in=cat(move_in).astype(i64),
            move_out=cat(move_out).astype(i64),
            move_graph=cat(move_graph).astype(i64),
            edge_move=cat(e_m).astype(i64),
            edge_phase=cat(e_p).astype(i64),
            edge_gamma=cat(e_g).astype(np.float64),
            phase_flag=cat(flags).astype(np.float64),
            phase_graph=cat(phase_graph).astype(i64),
            pair_recv=cat(p_r).astype(i64),
            pair_send=cat(p_s).astype(i64),
            pair_jacc=cat(p_j).astype(np.float64),
            phase_offsets=np.asarray(offsets, dtype=i64),
        )


def _heads(x: Tensor, n_heads: int) -> Tensor:
    return ad.reshape(x, (x.shape[0], n_heads, -1))


def _flat(x: Tensor) -> Tensor:
    return ad.reshape(x, (x.shape[0], -1))


def _score(pre: Tensor, a: Tensor) -> Tensor:
    """Per-head dynamic attention score ``a_h . leaky(pre_h)``; ``pre`` is (E, H, dh), ``a`` is (H, dh).

    Evaluated as one product with the block-diagonal (H*dh, H) expansion of ``a``.
    """
    H, dh = a.shape
    mask = np.kron(np.eye(H, dtype=a.data.dtype), np.ones((dh, 1), dtype=a.data.dtype))
    block = ad.mul(ad.reshape(a, (H * dh, 1)), mask)
    return ad.matmul(_flat(ad.leaky_relu(pre, LEAKY_SLOPE)), block)


def _weighted(values: Tensor, alpha: Tensor) -> Tensor:
    return ad.mul(values, ad.reshape(alpha, alpha.shape + (1,)))


class HierarchicalEncoder:
    """Three-level attention encoder whose parameters live in a shared ``ParamStore``.

    One instance serves every intersection: the parameter count does not depend
    on the network it is applied to.
    """

    LEVELS = ("l1", "l2", "l3")

    def __init__(self, store: ParamStore, feature_dim: int, rng: np.random.Generator,
                 d_latent: int = D_LATENT, n_heads: int = N_HEADS, dropout: float = DROPOUT,
                 prefix: str = "enc", density_scale: float = DENSITY_SCALE):
        if d_latent % n_heads:
            raise ValueError(f"latent width {d_latent} is not divisible by {n_heads} heads")
        self.store, self.feature_dim = store, feature_dim
        self.d, self.H, self.dh = d_latent, n_heads, d_latent // n_heads
        self.dropout, self.prefix = dropout, prefix
        self.density_scale = density_scale
        # density and transition prior are the first and last feature columns
        self._in_scale = np.ones(feature_dim)
        self._in_scale[[0, -1]] = density_scale
        self.training = False
        self.rng = rng
        d, dh, H = self.d, self.dh, self.H
        p = prefix
        # segment -> movement
        store.linear(f"{p}.l1.W_s", feature_dim, d, rng)
        store.linear(f"{p}.l1.W_s_res", feature_dim, d, rng)
        store.uniform(f"{p}.l1.a_s", (H, dh), 1.0 / np.sqrt(dh), rng)
        store.add(f"{p}.l1.b_s", np.zeros(d))
        store.linear(f"{p}.l1.W_out", d, d, rng)
        store.add(f"{p}.l1.b_out", np.zeros(d))
        # movement -> phase
        store.linear(f"{p}.l2.W_m", d, d, rng)
        store.linear(f"{p}.l2.W_m_res", d, d, rng)
        store.linear(f"{p}.l2.W_flag", 1, d, rng)
        store.linear(f"{p}.l2.W_gamma", 1, d, rng)
        store.uniform(f"{p}.l2.a_m", (H, dh), 1.0 / np.sqrt(dh), rng)
        store.add(f"{p}.l2.b_m", np.zeros(d))
        store.linear(f"{p}.l2.W_out", d, d, rng)
        store.add(f"{p}.l2.b_out", np.zeros(d))
        # phase <-> phase
        store.linear(f"{p}.l3.W_phi", d, d, rng)
        store.linear(f"{p}.l3.W_phi_res", d, d, rng)
        store.linear(f"{p}.l3.W_J", 1, d, rng)
        store.uniform(f"{p}.l3.a_phi", (H, dh), 1.0 / np.sqrt(dh), rng)
        store.add(f"{p}.l3.b_phi", np.zeros(d))
        store.linear(f"{p}.l3.W_out", d, d, rng)
        store.add(f"{p}.l3.b_out", np.zeros(d))
        for lvl in self.LEVELS:
            q = f"{p}.{lvl}.mlp"
            store.linear(f"{q}.W1", d, d, rng)
            store.add(f"{q}.b1", np.zeros(d))
            store.add(f"{q}.ln_gain", np.ones(d))
            store.add(f"{q}.ln_bias", np.zeros(d))
            store.linear(f"{q}.W2", d, d, rng)
            store.add(f"{q}.b2", np.zeros(d))

    def _const(self, x: np.ndarray) -> Tensor:
        return Tensor(x, dtype=self.store.dtype)

    def _p(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]

    def parameter_counts(self) -> dict[str, int]:
        out = {}
        for lvl in self.LEVELS:
            out[lvl] = int(sum(t.data.size for k, t in self.store.subset(f"{self.prefix}.{lvl}.").items()))
        return out

    # -- building blocks ---------------------------------------------------

    def _merge(self, per_head: Tensor, lvl: str) -> Tensor:
        """Concatenate heads, project to d', then apply the residual embedding perceptron."""
        h = ad.add(ad.matmul(_flat(per_head), self._p(f"{lvl}.W_out")), self._p(f"{lvl}.b_out"))
        q = f"{lvl}.mlp"
        z = ad.add(ad.matmul(h, self._p(f"{q}.W1")), self._p(f"{q}.b1"))
        z = ad.add(ad.mul(ad.layer_norm(z), self._p(f"{q}.ln_gain")), self._p(f"{q}.ln_bias"))
        z = ad.leaky_relu(z, LEAKY_SLOPE)
        z = ad.dropout(z, self.dropout, self.training, self.rng)
        z = ad.add(ad.matmul(z, self._p(f"{q}.W2")), self._p(f"{q}.b2"))
        return ad.add(h, z)

    def seg_to_move(self, batch: GraphBatch, return_attention: bool = False):
        H = self.H
        x = self._const(batch.seg_feat * self._in_scale)
        z = _heads(ad.matmul(x, self._p("l1.W_s")), H)
        alpha = ad.grouped_softmax(_score(z, self._p("l1.a_s")), batch.seg_lane, batch.n_lanes)
        lane_agg = ad.segment_sum(_weighted(z, alpha), batch.seg_lane, batch.n_lanes)
        agg = ad.add(ad.gather(lane_agg, batch.move_in), ad.gather(lane_agg, batch.move_out))
        # movement nodes start empty, so the residual term carries no information
        h0 = self._const(np.zeros((batch.n_moves, self.feature_dim)))
        res = _heads(ad.matmul(h0, self._p("l1.W_s_res")), H)
        pre = ad.add(ad.add(res, agg), ad.reshape(self._p("l1.b_s"), (H, self.dh)))
        hm = self._merge(ad.leaky_relu(pre, LEAKY_SLOPE), "l1")
        return (hm, alpha.data) if return_attention else hm

    def move_to_phase(self, hm: Tensor, batch: GraphBatch, return_attention: bool = False):
        H, dh = self.H, self.dh
        vm = _heads(ad.matmul(hm, self._p("l2.W_m")), H)
        values = ad.gather(vm, batch.edge_move)
        flag = self._const(batch.phase_flag[batch.edge_phase][:, None])
        gamma = self._const(batch.edge_gamma[:, None])
        score_in = ad.add(
            values,
            _heads(ad.add(ad.matmul(flag, self._p("l2.W_flag")), ad.matmul(gamma, self._p("l2.W_gamma"))), H),
        )
        alpha = ad.grouped_softmax(_score(score_in, self._p("l2.a_m")), batch.edge_phase, batch.n_phases)
        agg = ad.segment_sum(_weighted(values, alpha), batch.edge_phase, batch.n_phases)
        pooled = ad.gather(ad.segment_mean(hm, batch.move_graph, batch.n_graphs), batch.phase_graph)
        res = _heads(ad.matmul(pooled, self._p("l2.W_m_res")), H)
        pre = ad.add(ad.add(res, agg), ad.reshape(self._p("l2.b_m"), (H, dh)))
        hp = self._merge(ad.leaky_relu(pre, LEAKY_SLOPE), "l2")
        return (hp, alpha.data) if return_attention else hp

    def phase_propagation(self, hp: Tensor, batch: GraphBatch, return_attention: bool = False):
        H, dh = self.H, self.dh
        vp = _heads(ad.matmul(hp, self._p("l3.W_phi")), H)
        recv = ad.gather(vp, batch.pair_recv)
        send = ad.gather(vp, batch.pair_send)
        jac = _heads(ad.matmul(self._const(batch.pair_jacc[:, None]), self._p("l3.W_J")), H)
        score = _score(ad.add(ad.add(recv, send), jac), self._p("l3.a_phi"))
        alpha = ad.grouped_softmax(score, batch.pair_recv, batch.n_phases)
        agg = ad.segment_sum(_weighted(send, alpha), batch.pair_recv, batch.n_phases)
        res = _heads(ad.matmul(hp, self._p("l3.W_phi_res")), H)
        pre = ad.add(ad.add(res, agg), ad.reshape(self._p("l3.b_phi"), (H, dh)))
        out = self._merge(ad.leaky_relu(pre, LEAKY_SLOPE), "l3")
        return (out, alpha.data) if return_attention else out

    def forward(self, batch: GraphBatch) -> Tensor:
        """Per-phase embeddings, ``(total phases, d')``, in batch order."""
        hm = self.seg_to_move(batch)
        hp = self.move_to_phase(hm, batch)
        return self.phase_propagation(hp, batch)

    def encode(self, graphs: list[StateGraph]) -> list[np.ndarray]:
        """Convenience wrapper: embeddings per graph, without recording gradients."""
        batch = GraphBatch.from_graphs(graphs)
        with ad.no_grad():
            return batch.split(self.forward(batch).data)
