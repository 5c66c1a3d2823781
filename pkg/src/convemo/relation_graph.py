"""Speaker relation subgraphs over the text stream and relation-aware GAT passes."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .encoding import glorot, one_hot, zeros
from .errors import ConfigError
from .numerics import Tensor

STRATEGIES = ("single", "parallel_sum", "parallel_concat", "rel_incremental", "incremental")


class Relation(IntEnum):
    SELF = 0
    FORWARD = 1
    BACKWARD = 2


class Edge(NamedTuple):
    source: int
    target: int
    relation: Relation


def relation_type(source: int, target: int) -> Relation:
    if source == target:
        return Relation.SELF
    return Relation.FORWARD if source < target else Relation.BACKWARD


@dataclass
class GraphTopology:
    edges: list[Edge]
    node_count: int
    kind: str  # "inter" | "intra" | "union"

    def adjacency(self, N: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Dense (target, source) adjacency and relation-type matrices."""
        N = N or self.node_count
        adj = np.zeros((N, N), dtype=bool)
        rel = np.zeros((N, N), dtype=np.int64)
        for e in self.edges:
            adj[e.target, e.source] = True
            rel[e.target, e.source] = int(e.relation)
        return adj, rel

    def union(self, other: "GraphTopology") -> "GraphTopology":
        edges = sorted(set(self.edges) | set(other.edges), key=lambda e: (e.target, e.source))
        return GraphTopology(edges, self.node_count, "union")


def build_subgraphs(speakers, k: int, mask=None) -> tuple[GraphTopology, GraphTopology]:
    """Windowed inter-speaker and intra-speaker graphs, ordered target-major."""
    if k < 0:
        raise ConfigError(f"window k must be >= 0, got {k}")
    speakers = list(speakers)
    N = len(speakers)
    valid = [True] * N if mask is None else [bool(m) for m in mask]
    inter, intra = [], []
    for i in range(N):
        if not valid[i]:
            continue
        for j in range(max(0, i - k), min(N, i + k + 1)):
            if not valid[j]:
                continue
            edge = Edge(j, i, relation_type(j, i))
            (intra if speakers[i] == speakers[j] else inter).append(edge)
    return GraphTopology(inter, N, "inter"), GraphTopology(intra, N, "intra")


def relation_embed(r, R_e: Tensor) -> Tensor:
    """Row of the relation table for relation type(s) ``r``."""
    r = np.asarray(r)
    if np.any((r < 0) | (r >= R_e.shape[0])):
        raise ConfigError(f"unknown relation type {r}")
    return nx.tensor(one_hot(r, R_e.shape[0], R_e.dtype), dtype=R_e.dtype) @ R_e


@dataclass
class GatParams:
    W: Tensor  # (heads, d, d)
    a: Tensor  # (heads, 2d + d_r): [target | source | relation]

    @classmethod
    def init(cls, rng, d: int, d_r: int, heads: int = 2) -> "GatParams":
        W = glorot(rng, d, d, shape=(heads, d, d))
        a = glorot(rng, 2 * d + d_r, 1, shape=(heads, 2 * d + d_r))
        return cls(W, a)


ACTIVATIONS = {"elu": nx.elu, "identity": lambda x: x, "tanh": nx.tanh}


def gat_layer(Z: Tensor, adj, rel, R_e: Tensor, p: GatParams, slope: float = 0.2,
              activation: str = "elu", dropout: float = 0.0, rng=None, training: bool = False,
              return_attention: bool = False):
    """One relation-aware graph attention pass, heads averaged before the activation.

    ``adj[b, i, j]`` marks an edge from source j to target i. Nodes without
    neighbours pass their input through unchanged.
    """
    squeeze = Z.ndim == 2
    if squeeze:
        Z = nx.reshape(Z, (1,) + Z.shape)
        adj, rel = np.asarray(adj)[None], np.asarray(rel)[None]
    adj = np.asarray(adj, dtype=bool)
    B, N, d = Z.shape
    H = p.W.shape[0]
    if p.a.shape[1] != 2 * d + R_e.shape[1]:
        raise ConfigError(f"attention vector length {p.a.shape[1]} != 2*{d} + {R_e.shape[1]}")
    has_nbr = adj.any(axis=-1)                       # (B, N)
    safe = adj | (~has_nbr[..., None] & np.eye(N, dtype=bool))

    WZ = nx.reshape(Z, (B, 1, N, d)) @ p.W           # (B, H, N, d)
    a_tgt = nx.reshape(p.a[:, :d], (H, d, 1))
    a_src = nx.reshape(p.a[:, d:2 * d], (H, d, 1))
    a_rel = nx.transpose(p.a[:, 2 * d:], (1, 0))     # (d_r, H)
    s_tgt = WZ @ a_tgt                               # (B, H, N, 1)
    s_src = nx.transpose(WZ @ a_src, (0, 1, 3, 2))   # (B, H, 1, N)
    rel_score = nx.tensor(one_hot(rel, R_e.shape[0], Z.dtype), dtype=Z.dtype) @ (R_e @ a_rel)
    rel_score = nx.transpose(rel_score, (0, 3, 1, 2))  # (B, H, N, N)
    logits = nx.leaky_relu(s_tgt + s_src + rel_score, slope)
    attn = nx.softmax_rows(logits, safe[:, None])
    agg = (attn @ WZ).mean(axis=1)                   # (B, N, d)
    out = ACTIVATIONS[activation](agg)
    keep = has_nbr[..., None].astype(Z.dtype)
    out = out * keep + Z * (1.0 - keep)
    out = nx.dropout(out, dropout, rng, training)
    if squeeze:
        out = nx.reshape(out, out.shape[1:])
        attn = nx.reshape(attn, attn.shape[1:])
    return (out, attn) if return_attention else out


@dataclass
class GraphParams:
    strategy: str
    gats: dict[str, GatParams]
    relations: dict[str, Tensor]
    concat_W: Tensor | None = None
    concat_b: Tensor | None = None

    @classmethod
    def init(cls, rng, d: int, strategy: str = "incremental", d_r: int = 10, heads: int = 2) -> "GraphParams":
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown interaction strategy '{strategy}'")

        def rel_table():
            return nx.tensor(rng.normal(0.0, 1.0 / np.sqrt(d_r), size=(3, d_r)), requires_grad=True)

        if strategy == "single":
            return cls(strategy, {"single": GatParams.init(rng, d, d_r, heads)}, {"single": rel_table()})
        gats = {"inter": GatParams.init(rng, d, d_r, heads), "intra": GatParams.init(rng, d, d_r, heads)}
        if strategy == "rel_incremental":
            shared = rel_table()
            relations = {"inter": shared, "intra": shared}
        else:
            relations = {"inter": rel_table(), "intra": rel_table()}
        params = cls(strategy, gats, relations)
        if strategy == "parallel_concat":
            params.concat_W = glorot(rng, 2 * d, d)
            params.concat_b = zeros(d)
        return params


@dataclass
class BatchTopology:
    """Dense, batched view of per-dialogue inter/intra graphs."""
    inter_adj: np.ndarray
    inter_rel: np.ndarray
    intra_adj: np.ndarray
    intra_rel: np.ndarray
    graphs: list[tuple[GraphTopology, GraphTopology]] = field(default_factory=list)

    @classmethod
    def build(cls, speakers, mask, k: int) -> "BatchTopology":
        speakers = np.asarray(speakers)
        mask = np.asarray(mask, dtype=bool)
        B, N = speakers.shape
        arrays = [np.zeros((B, N, N), dtype=bool), np.zeros((B, N, N), dtype=np.int64),
                  np.zeros((B, N, N), dtype=bool), np.zeros((B, N, N), dtype=np.int64)]
        graphs = []
        for b in range(B):
            inter, intra = build_subgraphs(speakers[b], k, mask[b])
            graphs.append((inter, intra))
            arrays[0][b], arrays[1][b] = inter.adjacency(N)
            arrays[2][b], arrays[3][b] = intra.adjacency(N)
        return cls(*arrays, graphs=graphs)

    @classmethod
    def from_graphs(cls, inter: GraphTopology, intra: GraphTopology) -> "BatchTopology":
        """Unbatched (N, N) view of a single dialogue's pair of graphs."""
        return cls(*inter.adjacency(), *intra.adjacency(), graphs=[(inter, intra)])


def interact(Z: Tensor, topo: BatchTopology, p: GraphParams, slope: float = 0.2,
             activation: str = "elu", dropout: float = 0.0, rng=None, training: bool = False) -> Tensor:
    if isinstance(topo, tuple):
        topo = BatchTopology.from_graphs(*topo)
    kw = dict(slope=slope, activation=activation, dropout=dropout, rng=rng, training=training)
    s = p.strategy
    if s == "single":
        adj = topo.inter_adj | topo.intra_adj
        rel = np.where(topo.inter_adj, topo.inter_rel, topo.intra_rel)
        return gat_layer(Z, adj, rel, p.relations["single"], p.gats["single"], **kw)
    if s in ("incremental", "rel_incremental"):
        Z1 = gat_layer(Z, topo.inter_adj, topo.inter_rel, p.relations["inter"], p.gats["inter"], **kw)
        return gat_layer(Z1, topo.intra_adj, topo.intra_rel, p.relations["intra"], p.gats["intra"], **kw)
    z_inter = gat_layer(Z, topo.inter_adj, topo.inter_rel, p.relations["inter"], p.gats["inter"], **kw)
    z_intra = gat_layer(Z, topo.intra_adj, topo.intra_rel, p.relations["intra"], p.gats["intra"], **kw)
    if s == "parallel_sum":
        return z_inter + z_intra
    if s == "parallel_concat":
        return nx.concat([z_inter, z_intra], axis=-1) @ p.concat_W + p.concat_b
    raise ConfigError(f"unknown interaction strategy '{s}'")
