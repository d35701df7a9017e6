"""Graph representation, hop distances, ego-nets, focal masks and Laplacian encodings."""

import hashlib
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from pydantic import BaseModel

# Sentinels stored in hop matrices. Both exceed any real hop count, so a
# plain `hops <= fl` comparison never admits them.
UNREACHABLE = np.iinfo(np.int32).max
VIRTUAL = UNREACHABLE - 1

ZERO_EIGENVALUE_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected labeled graph with sorted adjacency lists.

    `edges` holds each undirected edge once as (u, v) with u < v, sorted
    lexicographically; `edge_type_ids` (when present) is aligned with it.
    """

    num_nodes: int
    edges: np.ndarray
    node_feature_ids: np.ndarray
    node_labels: np.ndarray | None = None
    edge_type_ids: np.ndarray | None = None
    adjacency: tuple[tuple[int, ...], ...] = field(default=(), repr=False)

    @classmethod
    def from_edges(
        cls,
        num_nodes: int,
        edges: Iterable[Sequence[int]],
        node_feature_ids: Sequence[int] | np.ndarray | None = None,
        node_labels: Sequence[int] | np.ndarray | None = None,
        edge_type_ids: Sequence[int] | np.ndarray | None = None,
    ) -> "Graph":
        if num_nodes < 0:
            raise ValueError(f"num_nodes must be non-negative; received {num_nodes}")

        edge_array = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if edge_array.size and (edge_array.min() < 0 or edge_array.max() >= num_nodes):
            raise ValueError(f"edge endpoint out of range for {num_nodes} nodes")
        if np.any(edge_array[:, 0] == edge_array[:, 1]):
            loop = edge_array[edge_array[:, 0] == edge_array[:, 1]][0]
            raise ValueError(f"self-loop on node {int(loop[0])} is not allowed")

        canonical = np.sort(edge_array, axis=1)
        order = np.lexsort((canonical[:, 1], canonical[:, 0]))
        canonical = canonical[order]
        if len(canonical) > 1 and np.any(np.all(canonical[1:] == canonical[:-1], axis=1)):
            raise ValueError("duplicate edge in edge list")

        types = None
        if edge_type_ids is not None:
            types = np.asarray(edge_type_ids, dtype=np.int64)
            if types.shape != (len(edge_array),):
                raise ValueError(f"edge_type_ids has length {types.size}; expected {len(edge_array)}")
            if types.size and types.min() < 0:
                raise ValueError("edge_type_ids must be non-negative")
            types = types[order]

        if node_feature_ids is None:
            features = np.zeros(num_nodes, dtype=np.int64)
        else:
            features = np.asarray(node_feature_ids, dtype=np.int64)
        if features.shape != (num_nodes,):
            raise ValueError(f"node_feature_ids has length {features.size}; expected {num_nodes}")
        if features.size and features.min() < 0:
            raise ValueError("node_feature_ids must be non-negative")

        labels = None
        if node_labels is not None:
            labels = np.asarray(node_labels, dtype=np.int64)
            if labels.shape != (num_nodes,):
                raise ValueError(f"node_labels has length {labels.size}; expected {num_nodes}")
            if labels.size and labels.min() < 0:
                raise ValueError("node_labels must be non-negative")

        neighbors: list[list[int]] = [[] for _ in range(num_nodes)]
        for u, v in canonical.tolist():
            neighbors[u].append(v)
            neighbors[v].append(u)
        adjacency = tuple(tuple(sorted(row)) for row in neighbors)

        return cls(
            num_nodes=num_nodes,
            edges=canonical,
            node_feature_ids=features,
            node_labels=labels,
            edge_type_ids=types,
            adjacency=adjacency,
        )

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def adjacency_matrix(self) -> np.ndarray:
        matrix = np.zeros((self.num_nodes, self.num_nodes), dtype=np.float64)
        if self.num_edges:
            matrix[self.edges[:, 0], self.edges[:, 1]] = 1.0
            matrix[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return matrix

    def fingerprint(self) -> str:
        """Stable digest of structure and features, used as a cache key."""
        digest = hashlib.blake2b(digest_size=16)
        digest.update(np.int64(self.num_nodes).tobytes())
        digest.update(self.edges.astype("<i8").tobytes())
        digest.update(self.node_feature_ids.astype("<i8").tobytes())
        if self.edge_type_ids is not None:
            digest.update(b"types")
            digest.update(self.edge_type_ids.astype("<i8").tobytes())
        return digest.hexdigest()

    def with_labels(self, labels: Sequence[int] | np.ndarray | None) -> "Graph":
        return Graph.from_edges(self.num_nodes, self.edges, self.node_feature_ids, labels, self.edge_type_ids)


@dataclass(frozen=True, eq=False)
class HopMatrix:
    n: int
    hops: np.ndarray

    def __post_init__(self):
        if self.hops.shape != (self.n, self.n):
            raise ValueError(f"hop matrix shape {self.hops.shape} does not match n={self.n}")

    @property
    def has_virtual(self) -> bool:
        return bool(np.any(self.hops == VIRTUAL))


@dataclass(frozen=True, eq=False)
class FocalMask:
    """Sparse per-node in-scope lists; `dense` materializes the 0/1 matrix."""

    n: int
    fl: int
    rows: tuple[np.ndarray, ...]

    @cached_property
    def dense(self) -> np.ndarray:
        matrix = np.zeros((self.n, self.n), dtype=bool)
        for i, row in enumerate(self.rows):
            matrix[i, row] = True
        return matrix

    @property
    def pair_count(self) -> int:
        return int(sum(len(row) for row in self.rows))


@dataclass(frozen=True, eq=False)
class LapPeFeatures:
    n: int
    k: int
    vectors: np.ndarray
    eigenvalues: np.ndarray


class GraphRecord(BaseModel):
    """One line of the graph file format."""

    num_nodes: int
    edges: list[tuple[int, int]]
    node_feats: list[int]
    node_labels: list[int] | None = None
    edge_types: list[int] | None = None

    @classmethod
    def from_graph(cls, graph: Graph) -> "GraphRecord":
        return cls(
            num_nodes=graph.num_nodes,
            edges=[(u, v) for u, v in graph.edges.tolist()],
            node_feats=graph.node_feature_ids.tolist(),
            node_labels=None if graph.node_labels is None else graph.node_labels.tolist(),
            edge_types=None if graph.edge_type_ids is None else graph.edge_type_ids.tolist(),
        )

    def to_graph(self) -> Graph:
        return Graph.from_edges(
            self.num_nodes,
            self.edges,
            self.node_feats,
            self.node_labels,
            self.edge_types,
        )


def dumps_graph(graph: Graph) -> str:
    return GraphRecord.from_graph(graph).model_dump_json(exclude_none=True)


def loads_graph(line: str) -> Graph:
    return GraphRecord.model_validate_json(line).to_graph()


def _check_node(n: int, node: int, name: str) -> None:
    if not 0 <= node < n:
        raise ValueError(f"{name} {node} out of range for {n} nodes")


def bfs_hops(graph: Graph, source: int) -> np.ndarray:
    """Hop counts from `source`; unreachable nodes carry UNREACHABLE."""

    _check_node(graph.num_nodes, source, "source")
    hops = np.full(graph.num_nodes, UNREACHABLE, dtype=np.int64)
    hops[source] = 0
    queue = deque([source])
    while queue:
        node = queue.popleft()
        next_hop = hops[node] + 1
        for neighbor in graph.adjacency[node]:
            if hops[neighbor] == UNREACHABLE:
                hops[neighbor] = next_hop
                queue.append(neighbor)
    return hops


def hop_matrix(graph: Graph) -> HopMatrix:
    """All-pairs hop counts by level-synchronous BFS from every source at once."""

    n = graph.num_nodes
    adjacency = graph.adjacency_matrix()
    hops = np.full((n, n), UNREACHABLE, dtype=np.int32)
    np.fill_diagonal(hops, 0)
    reached = np.eye(n, dtype=bool)
    frontier = reached.copy()
    level = 0
    while frontier.any():
        level += 1
        expanded = (frontier.astype(np.float64) @ adjacency) > 0
        frontier = expanded & ~reached
        hops[frontier] = level
        reached |= frontier
    return HopMatrix(n=n, hops=hops)


def ego_net(hops: HopMatrix, center: int, fl: int) -> list[int]:
    """Nodes within `fl` hops of `center` (plus a virtual node, which is always in scope)."""

    _check_node(hops.n, center, "center")
    if fl < 0:
        raise ValueError(f"fl must be >= 0; received {fl}")
    row = hops.hops[center]
    return np.flatnonzero((row <= fl) | (row == VIRTUAL)).tolist()


def focal_mask(hops: HopMatrix, fl: int) -> FocalMask:
    if fl < 0:
        raise ValueError(f"fl must be >= 0; received {fl}")
    in_scope = (hops.hops <= fl) | (hops.hops == VIRTUAL)
    rows = tuple(np.flatnonzero(in_scope[i]) for i in range(hops.n))
    return FocalMask(n=hops.n, fl=fl, rows=rows)


def add_virtual_node(
    graph: Graph,
    hops: HopMatrix,
    feature_id: int | None = None,
) -> tuple[Graph, HopMatrix]:
    """Append a virtual node sitting at the VIRTUAL distance from every real node.

    The virtual node gets no adjacency entries; only the hop matrix records it.
    `feature_id` defaults to the first id above those in use. Node labels are
    dropped from the augmented graph since the virtual node has none.
    """

    if hops.n != graph.num_nodes:
        raise ValueError(f"hop matrix covers {hops.n} nodes; graph has {graph.num_nodes}")
    if feature_id is None:
        feature_id = int(graph.node_feature_ids.max(initial=-1)) + 1

    n = graph.num_nodes
    augmented_hops = np.full((n + 1, n + 1), VIRTUAL, dtype=np.int32)
    augmented_hops[:n, :n] = hops.hops
    augmented_hops[n, n] = 0

    augmented = Graph.from_edges(
        n + 1,
        graph.edges,
        np.append(graph.node_feature_ids, feature_id),
        None,
        graph.edge_type_ids,
    )
    return augmented, HopMatrix(n=n + 1, hops=augmented_hops)


def edge_type_matrix(graph: Graph) -> np.ndarray:
    """Dense n x n edge category ids; 0 for non-edges and untyped graphs."""

    matrix = np.zeros((graph.num_nodes, graph.num_nodes), dtype=np.int16)
    if graph.num_edges and graph.edge_type_ids is not None:
        if graph.edge_type_ids.max() > np.iinfo(np.int16).max:
            raise ValueError(f"edge type id {graph.edge_type_ids.max()} does not fit in int16")
        matrix[graph.edges[:, 0], graph.edges[:, 1]] = graph.edge_type_ids
        matrix[graph.edges[:, 1], graph.edges[:, 0]] = graph.edge_type_ids
    return matrix


def connected_components(graph: Graph) -> list[list[int]]:
    """Components as sorted node lists, ordered by their smallest node."""

    seen = np.zeros(graph.num_nodes, dtype=bool)
    components = []
    for start in range(graph.num_nodes):
        if seen[start]:
            continue
        members = np.flatnonzero(bfs_hops(graph, start) != UNREACHABLE)
        seen[members] = True
        components.append(members.tolist())
    return components


def is_connected(graph: Graph) -> bool:
    if graph.num_nodes == 0:
        return True
    return bool(np.all(bfs_hops(graph, 0) != UNREACHABLE))


def diameter(hops: HopMatrix) -> int:
    """Max eccentricity on the largest connected component (ties: lowest node id)."""

    if hops.n == 0:
        return 0
    reachable = (hops.hops != UNREACHABLE) & (hops.hops != VIRTUAL)
    sizes = reachable.sum(axis=1)
    root = int(np.argmax(sizes))
    members = np.flatnonzero(reachable[root])
    return int(hops.hops[np.ix_(members, members)].max())


def permute_graph(graph: Graph, perm: Sequence[int] | np.ndarray) -> Graph:
    """Relabel node `i` as `perm[i]`."""

    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(graph.num_nodes)):
        raise ValueError("perm must be a permutation of the node ids")
    inverse = np.argsort(perm)
    return Graph.from_edges(
        graph.num_nodes,
        perm[graph.edges] if graph.num_edges else graph.edges,
        graph.node_feature_ids[inverse],
        None if graph.node_labels is None else graph.node_labels[inverse],
        graph.edge_type_ids,
    )


def lap_pe(graph: Graph, k: int) -> LapPeFeatures:
    """Eigenvectors of I - D^-1/2 A D^-1/2 with the k smallest nonzero eigenvalues.

    Zero-eigenvalue vectors (one per connected component) are excluded, and
    columns are zero-padded when fewer than k nonzero eigenvalues exist. Each
    column's first nonzero coordinate is made positive. Isolated nodes get a
    zero normalized-adjacency row.
    """

    n = graph.num_nodes
    if k < 0 or k >= n:
        raise ValueError(f"lap_pe needs 0 <= k < num_nodes; received k={k} for {n} nodes")

    adjacency = graph.adjacency_matrix()
    degree = adjacency.sum(axis=1)
    inv_sqrt = np.zeros(n)
    np.divide(1.0, np.sqrt(degree), out=inv_sqrt, where=degree > 0)
    laplacian = np.eye(n) - inv_sqrt[:, None] * adjacency * inv_sqrt[None, :]

    eigenvalues, eigenvectors = np.linalg.eigh(laplacian)
    keep = eigenvalues > ZERO_EIGENVALUE_TOL
    eigenvalues = eigenvalues[keep][:k]
    eigenvectors = eigenvectors[:, keep][:, :k]

    vectors = np.zeros((n, k))
    values = np.zeros(k)
    vectors[:, : eigenvectors.shape[1]] = eigenvectors
    values[: eigenvalues.shape[0]] = eigenvalues

    for column in range(vectors.shape[1]):
        nonzero = np.flatnonzero(np.abs(vectors[:, column]) > 1e-10)
        if nonzero.size and vectors[nonzero[0], column] < 0:
            vectors[:, column] = -vectors[:, column]

    return LapPeFeatures(n=n, k=k, vectors=vectors, eigenvalues=values)
