import numpy as np

from config import ModelConfig, RunConfig, SbmSection, TrainConfig
from graph import UNREACHABLE, Graph, is_connected


def chain_graph(n: int, features=None) -> Graph:
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)], features)


def star_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(0, i) for i in range(1, n)])


def complete_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def random_graph(rng: np.random.Generator, n: int, p: float, vocab: int = 3, edge_types: int | None = None) -> Graph:
    edges = np.argwhere(np.triu(rng.random((n, n)) < p, k=1))
    types = None if edge_types is None else rng.integers(0, edge_types, size=len(edges))
    return Graph.from_edges(n, edges, rng.integers(0, vocab, size=n), rng.integers(0, 2, size=n), types)


def random_connected_graph(rng: np.random.Generator, n: int, p: float, **kwargs) -> Graph:
    while True:
        graph = random_graph(rng, n, p, **kwargs)
        if is_connected(graph):
            return graph


def floyd_warshall(graph: Graph) -> np.ndarray:
    n = graph.num_nodes
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    for u, v in graph.edges.tolist():
        dist[u, v] = dist[v, u] = 1.0
    for k in range(n):
        dist = np.minimum(dist, dist[:, [k]] + dist[[k], :])
    return np.where(np.isinf(dist), UNREACHABLE, dist).astype(np.int64)


def small_model(**overrides) -> ModelConfig:
    values = dict(dim=8, layers=1, full_heads=1, focal_heads=1, fl=1, mlp_hidden=8, max_hop_bucket=4, lap_pe_k=2)
    values.update(overrides)
    return ModelConfig(**values)


def tiny_sbm(**overrides) -> SbmSection:
    values = dict(
        community_size_range=(3, 5),
        pattern_size=5,
        n_patterns=4,
        connected_only=False,
        n_train=6,
        n_val=3,
        n_test=3,
    )
    values.update(overrides)
    return SbmSection(**values)


def tiny_run_config(**train_overrides) -> RunConfig:
    train = dict(epochs=2, batch_size=4, lr=5e-3)
    train.update(train_overrides)
    return RunConfig(sbm=tiny_sbm(), model=small_model(), train=TrainConfig(**train))


TINY_CONFIG_TEXT = """\
[sbm]
community_size_range = 3,5
pattern_size = 5
n_patterns = 4
connected_only = false
n_train = 4
n_val = 2
n_test = 2

[model]
dim = 8
layers = 1
full_heads = 1
focal_heads = 1
fl = 1
mlp_hidden = 8
max_hop_bucket = 4
lap_pe_k = 2

[train]
epochs = 2
batch_size = 2
lr = 0.005
ablate_fl = vanilla,1
ablate_seeds = 0
"""
