"""Compound attention layer: full-range heads over the whole graph plus focal heads over K-hop ego-nets."""

import math
from dataclasses import dataclass, field

import numpy as np

from autodiff import (
    Tensor,
    add,
    concat,
    layer_norm,
    linear,
    lookup_scalar,
    masked_row_softmax,
    matmul,
    mul,
    parameter,
    relu,
    scale,
    transpose,
)
from config import ConfigError, ModelConfig
from graph import UNREACHABLE, VIRTUAL, FocalMask, Graph, HopMatrix, edge_type_matrix, focal_mask


def bucket_ids(hops: np.ndarray, max_hop: int) -> np.ndarray:
    """Map hop counts to bias buckets: 0..max_hop, FAR, DISC (unreachable), VIRTUAL."""

    hops = np.asarray(hops)
    buckets = np.minimum(hops, max_hop + 1)
    buckets = np.where(hops == UNREACHABLE, max_hop + 2, buckets)
    buckets = np.where(hops == VIRTUAL, max_hop + 3, buckets)
    return buckets.astype(np.int16)


@dataclass
class HeadParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1]

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.w_q", self.w_q), (f"{prefix}.w_k", self.w_k), (f"{prefix}.w_v", self.w_v)]


@dataclass
class BiasTables:
    """Per-head scalar biases by hop bucket, plus per-edge-type biases on 1-hop pairs."""

    hop_bias: Tensor
    edge_bias: Tensor
    max_hop: int

    @property
    def num_buckets(self) -> int:
        return self.max_hop + 4


@dataclass
class GateTable:
    """Multiplicative post-softmax gate by hop bucket; skipped entirely when disabled."""

    gate: Tensor | None = None

    @property
    def enabled(self) -> bool:
        return self.gate is not None


@dataclass
class FfgtLayerParams:
    full_heads: list[HeadParams]
    focal_heads: list[HeadParams]
    bias: BiasTables
    gate: GateTable
    merge_w: Tensor
    merge_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    norm1_gamma: Tensor
    norm1_beta: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor

    @property
    def heads(self) -> list[HeadParams]:
        return self.full_heads + self.focal_heads

    def named_parameters(self, prefix: str = "layer") -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        for index, head in enumerate(self.full_heads):
            named += head.named_parameters(f"{prefix}.full{index}")
        for index, head in enumerate(self.focal_heads):
            named += head.named_parameters(f"{prefix}.focal{index}")
        named += [(f"{prefix}.hop_bias", self.bias.hop_bias), (f"{prefix}.edge_bias", self.bias.edge_bias)]
        if self.gate.enabled:
            named.append((f"{prefix}.gate", self.gate.gate))
        for name in (
            "merge_w",
            "merge_b",
            "mlp_w1",
            "mlp_b1",
            "mlp_w2",
            "mlp_b2",
            "norm1_gamma",
            "norm1_beta",
            "norm2_gamma",
            "norm2_beta",
        ):
            named.append((f"{prefix}.{name}", getattr(self, name)))
        return named


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_layer_params(config: ModelConfig, rng: np.random.Generator, num_edge_types: int = 1) -> FfgtLayerParams:
    d, d_h, hidden = config.dim, config.head_dim, config.hidden

    def head() -> HeadParams:
        return HeadParams(
            w_q=parameter(_glorot(rng, d, d_h)),
            w_k=parameter(_glorot(rng, d, d_h)),
            w_v=parameter(_glorot(rng, d, d_h)),
        )

    num_buckets = config.max_hop_bucket + 4
    return FfgtLayerParams(
        full_heads=[head() for _ in range(config.full_heads)],
        focal_heads=[head() for _ in range(config.focal_heads)],
        bias=BiasTables(
            hop_bias=parameter(np.zeros((num_buckets, config.heads))),
            edge_bias=parameter(np.zeros((num_edge_types, config.heads))),
            max_hop=config.max_hop_bucket,
        ),
        gate=GateTable(parameter(np.ones((num_buckets, config.heads))) if config.gate_enabled else None),
        merge_w=parameter(_glorot(rng, d, d)),
        merge_b=parameter(np.zeros(d)),
        mlp_w1=parameter(_glorot(rng, d, hidden)),
        mlp_b1=parameter(np.zeros(hidden)),
        mlp_w2=parameter(_glorot(rng, hidden, d)),
        mlp_b2=parameter(np.zeros(d)),
        norm1_gamma=parameter(np.ones(d)),
        norm1_beta=parameter(np.zeros(d)),
        norm2_gamma=parameter(np.ones(d)),
        norm2_beta=parameter(np.zeros(d)),
    )


@dataclass(frozen=True, eq=False)
class GraphStructure:
    """Per-graph layer inputs that do not depend on parameters; shared by all layers."""

    hops: HopMatrix
    buckets: np.ndarray
    edge_types: np.ndarray
    one_hop: np.ndarray
    mask: FocalMask | None = None
    max_hop: int = 10

    @property
    def n(self) -> int:
        return self.hops.n


def build_structure(graph: Graph, hops: HopMatrix, fl: int | None, max_hop: int) -> GraphStructure:
    if hops.n != graph.num_nodes:
        raise ValueError(f"hop matrix covers {hops.n} nodes; graph has {graph.num_nodes}")
    return GraphStructure(
        hops=hops,
        buckets=bucket_ids(hops.hops, max_hop),
        edge_types=edge_type_matrix(graph),
        one_hop=hops.hops == 1,
        mask=None if fl is None else focal_mask(hops, fl),
        max_hop=max_hop,
    )


def structure_bias(structure: GraphStructure, tables: BiasTables, head: int) -> Tensor:
    if structure.max_hop != tables.max_hop:
        raise ValueError(f"structure buckets use max_hop={structure.max_hop}; tables use {tables.max_hop}")
    hop_term = lookup_scalar(tables.hop_bias, structure.buckets, head)
    edge_term = lookup_scalar(tables.edge_bias, structure.edge_types, head, where=structure.one_hop)
    return add(hop_term, edge_term)


def build_bias_matrix(hops: HopMatrix, graph: Graph, tables: BiasTables, head: int) -> Tensor:
    """B[i, j] = hop_bias[bucket(hops[i, j]), head] + edge_bias[type(i, j), head] on 1-hop pairs."""

    return structure_bias(build_structure(graph, hops, None, tables.max_hop), tables, head)


def build_gate_matrix(structure: GraphStructure, gate: GateTable, head: int) -> Tensor | None:
    if not gate.enabled:
        return None
    return lookup_scalar(gate.gate, structure.buckets, head)


def _dense_mask(mask: FocalMask | np.ndarray | None) -> np.ndarray | None:
    if isinstance(mask, FocalMask):
        return mask.dense
    return mask


def attention_weights(
    x: Tensor,
    p: HeadParams,
    bias_matrix: Tensor | None,
    mask: FocalMask | np.ndarray | None,
) -> Tensor:
    """softmax(Q K^T / sqrt(d_h) + B) on the masked support, before gating."""

    if x.data.ndim != 2 or x.shape[1] != p.w_q.shape[0]:
        raise ValueError(f"input of shape {x.shape} does not match head projection {p.w_q.shape}")
    q = matmul(x, p.w_q)
    k = matmul(x, p.w_k)
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(p.head_dim))
    if bias_matrix is not None:
        scores = add(scores, bias_matrix)
    return masked_row_softmax(scores, _dense_mask(mask))


def attention_head(
    x: Tensor,
    p: HeadParams,
    bias_matrix: Tensor | None = None,
    gate_matrix: Tensor | None = None,
    mask: FocalMask | np.ndarray | None = None,
) -> Tensor:
    attn = attention_weights(x, p, bias_matrix, mask)
    if gate_matrix is not None:
        attn = mul(attn, gate_matrix)
    return matmul(attn, matmul(x, p.w_v))


def ffgt_layer(x: Tensor, params: FfgtLayerParams, structure: GraphStructure) -> Tensor:
    """One compound layer: concat(full, focal heads) -> merge -> residual LN -> MLP -> residual LN."""

    d = x.shape[1]
    if d % len(params.heads) or params.heads[0].head_dim * len(params.heads) != d:
        raise ConfigError(f"dim={d} is not split evenly across {len(params.heads)} heads")
    if params.focal_heads and structure.mask is None:
        raise ConfigError("focal heads need a structure built with a focal length")

    outputs = []
    for index, head in enumerate(params.heads):
        focal = index >= len(params.full_heads)
        outputs.append(
            attention_head(
                x,
                head,
                structure_bias(structure, params.bias, index),
                build_gate_matrix(structure, params.gate, index),
                structure.mask if focal else None,
            )
        )

    merged = linear(concat(outputs), params.merge_w, params.merge_b)
    y1 = layer_norm(add(x, merged), params.norm1_gamma, params.norm1_beta)
    hidden = relu(linear(y1, params.mlp_w1, params.mlp_b1))
    return layer_norm(add(y1, linear(hidden, params.mlp_w2, params.mlp_b2)), params.norm2_gamma, params.norm2_beta)


def khop_mpnn_reference(
    x: Tensor | np.ndarray,
    per_distance_weights: np.ndarray,
    w_v: Tensor | np.ndarray,
    hops: HopMatrix,
    fl: int,
) -> np.ndarray:
    """K-hop aggregation with one shared logit per distance, softmax-normalized over each ego-net."""

    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    w_v = w_v.data if isinstance(w_v, Tensor) else np.asarray(w_v, dtype=np.float64)
    weights = np.asarray(per_distance_weights, dtype=np.float64)
    if weights.shape != (fl + 1,):
        raise ValueError(f"need {fl + 1} per-distance weights; received {weights.shape}")

    values = x @ w_v
    out = np.zeros((hops.n, w_v.shape[1]))
    for i in range(hops.n):
        ego = np.flatnonzero(hops.hops[i] <= fl)
        logits = weights[hops.hops[i, ego]]
        alpha = np.exp(logits - logits.max())
        alpha /= alpha.sum()
        out[i] = alpha @ values[ego]
    return out


@dataclass
class PairCounter:
    """Counts (query, key) pairs whose score was computed."""

    touched: int = 0
    rows: int = field(default=0, repr=False)

    def add(self, pairs: int) -> None:
        self.touched += pairs
        self.rows += 1


def sparse_focal_forward(
    x: Tensor | np.ndarray,
    p: HeadParams,
    hops: HopMatrix,
    mask: FocalMask,
    *,
    tables: BiasTables | None = None,
    head_index: int = 0,
    edge_types: np.ndarray | None = None,
    gate: GateTable | None = None,
    counter: PairCounter | None = None,
) -> np.ndarray:
    """Forward-only focal head that only scores pairs inside each ego-net.

    Work is proportional to the total ego-net size rather than n^2. Matches
    the dense masked path of `attention_head` with the same tables.
    """

    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if mask.n != hops.n or x.shape[0] != hops.n:
        raise ValueError(f"mask ({mask.n}), hops ({hops.n}) and input ({x.shape[0]}) sizes differ")
    q, k, v = x @ p.w_q.data, x @ p.w_k.data, x @ p.w_v.data
    inv_sqrt = 1.0 / math.sqrt(p.head_dim)

    out = np.zeros((hops.n, p.head_dim))
    for i, ego in enumerate(mask.rows):
        scores = (k[ego] @ q[i]) * inv_sqrt
        row_hops = hops.hops[i, ego]
        buckets = None
        if tables is not None:
            buckets = bucket_ids(row_hops, tables.max_hop)
            scores = scores + tables.hop_bias.data[buckets, head_index]
            edge_row = np.zeros(len(ego), dtype=np.int64) if edge_types is None else edge_types[i, ego]
            scores = scores + np.where(row_hops == 1, tables.edge_bias.data[edge_row, head_index], 0.0)
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        if gate is not None and gate.enabled:
            if buckets is None:
                raise ValueError("gating needs bias tables for the bucket map")
            weights = weights * gate.gate.data[buckets, head_index]
        out[i] = weights @ v[ego]
        if counter is not None:
            counter.add(len(ego))
    return out
