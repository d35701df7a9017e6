"""SBM-PATTERN generator: five SBM communities plus one embedded pattern per graph."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from pydantic import BaseModel

from config import ConfigError, SbmPatternParams
from graph import Graph, diameter, hop_matrix, is_connected, permute_graph

SPLIT_IDS = {"train": 0, "val": 1, "test": 2}
BANK_STREAM_ID = 3

PRESET_PROBABILITIES = (0.10, 0.12, 0.14, 0.16)


class GenerationExhaustedError(RuntimeError):
    """Connected-only sampling ran out of redraws for the configured parameters."""


def preset(p: float, **overrides) -> SbmPatternParams:
    """Sparse configuration with q = 0.01, q_p = 0.05 and p = p_p."""
    return SbmPatternParams(**{"p": p, "p_p": p, "q": 0.01, "q_p": 0.05, **overrides})


def sample_stream(seed: int, split_id: int, index: int) -> np.random.Generator:
    """Independent generator for one (split, sample) pair, derived by seed spawning."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(split_id, index)))


@dataclass(frozen=True, eq=False)
class LabeledSample:
    graph: Graph
    labels: np.ndarray
    blocks: np.ndarray | None = None
    stream_key: tuple[int, int] | None = None

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes


class DatasetStats(BaseModel):
    n_graphs: int
    avg_nodes: float
    avg_degree: float
    avg_diameter: float


@dataclass
class SbmDataset:
    params: SbmPatternParams
    train: list[LabeledSample]
    val: list[LabeledSample]
    test: list[LabeledSample]
    stats: DatasetStats

    def splits(self) -> dict[str, list[LabeledSample]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def _upper_edges(probabilities: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = probabilities.shape[0]
    draws = rng.random((n, n)) < probabilities
    return np.argwhere(np.triu(draws, k=1))


def generate_pattern_bank(params: SbmPatternParams) -> list[Graph]:
    """`n_patterns` graphs of `pattern_size` nodes with intra-probability p_p."""

    rng = sample_stream(params.seed, BANK_STREAM_ID, 0)
    size = params.pattern_size
    probabilities = np.full((size, size), params.p_p)
    return [Graph.from_edges(size, _upper_edges(probabilities, rng)) for _ in range(params.n_patterns)]


def generate_sample(
    params: SbmPatternParams,
    pattern_bank: Sequence[Graph],
    rng: np.random.Generator,
) -> LabeledSample:
    """Draw one labeled graph; pattern nodes are labeled 1.

    Community sizes are uniform on the inclusive size range. With
    `connected_only`, disconnected draws are discarded and redrawn from the
    same stream.
    """

    if not pattern_bank:
        raise ConfigError("pattern bank is empty; generate it before drawing samples")

    lo, hi = params.community_size_range
    pattern_block = params.n_communities
    for attempt in range(1, params.max_attempts + 1):
        sizes = rng.integers(lo, hi + 1, size=params.n_communities)
        pattern = pattern_bank[int(rng.integers(len(pattern_bank)))]
        blocks = np.concatenate(
            [np.repeat(np.arange(params.n_communities), sizes), np.full(pattern.num_nodes, pattern_block)]
        )
        n = blocks.size
        n_community = n - pattern.num_nodes

        same = blocks[:, None] == blocks[None, :]
        in_pattern = blocks == pattern_block
        probabilities = np.where(same, params.p, params.q)
        probabilities[np.ix_(~in_pattern, in_pattern)] = params.q_p
        probabilities[np.ix_(in_pattern, ~in_pattern)] = params.q_p
        probabilities[np.ix_(in_pattern, in_pattern)] = 0.0

        edges = _upper_edges(probabilities, rng)
        if pattern.num_edges:
            edges = np.concatenate([edges, pattern.edges + n_community])
        features = rng.integers(0, params.feature_vocab, size=n)
        labels = in_pattern.astype(np.int64)

        perm = rng.permutation(n)
        graph = permute_graph(Graph.from_edges(n, edges, features, labels), perm)
        if params.connected_only and not is_connected(graph):
            logging.debug(f"Rejected disconnected SBM draw (attempt {attempt}, {n} nodes)")
            continue

        shuffled_blocks = np.empty_like(blocks)
        shuffled_blocks[perm] = blocks
        return LabeledSample(graph=graph, labels=graph.node_labels, blocks=shuffled_blocks)

    raise GenerationExhaustedError(f"no connected SBM draw within {params.max_attempts} attempts; relax the parameters")


def generate_split(
    params: SbmPatternParams,
    split: str,
    count: int,
    pattern_bank: Sequence[Graph],
    jobs: int = 1,
) -> list[LabeledSample]:
    if count < 1:
        raise ValueError(f"{split} split needs at least one sample; received {count}")
    split_id = SPLIT_IDS[split]

    def draw(index: int) -> LabeledSample:
        sample = generate_sample(params, pattern_bank, sample_stream(params.seed, split_id, index))
        return LabeledSample(sample.graph, sample.labels, sample.blocks, stream_key=(split_id, index))

    if jobs <= 1:
        return [draw(index) for index in range(count)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(draw, range(count)))


def dataset_stats(samples: Sequence[LabeledSample | Graph]) -> DatasetStats:
    """Average node count, average degree 2|E|/n, and average largest-component diameter."""

    if not samples:
        raise ValueError("dataset_stats needs at least one graph")
    nodes, degrees, diameters = [], [], []
    for sample in samples:
        graph = sample.graph if isinstance(sample, LabeledSample) else sample
        nodes.append(graph.num_nodes)
        degrees.append(2.0 * graph.num_edges / graph.num_nodes if graph.num_nodes else 0.0)
        diameters.append(diameter(hop_matrix(graph)))
    return DatasetStats(
        n_graphs=len(samples),
        avg_nodes=float(np.mean(nodes)),
        avg_degree=float(np.mean(degrees)),
        avg_diameter=float(np.mean(diameters)),
    )


def generate_dataset(
    params: SbmPatternParams,
    n_train: int,
    n_val: int,
    n_test: int,
    jobs: int = 1,
) -> SbmDataset:
    bank = generate_pattern_bank(params)
    logging.info(
        f"Generating SBM-PATTERN p={params.p} q={params.q} p_p={params.p_p} q_p={params.q_p} "
        f"({n_train}/{n_val}/{n_test} graphs, seed {params.seed})"
    )
    train = generate_split(params, "train", n_train, bank, jobs)
    val = generate_split(params, "val", n_val, bank, jobs)
    test = generate_split(params, "test", n_test, bank, jobs)
    stats = dataset_stats(train + val + test)
    logging.info(
        f"Dataset stats: {stats.n_graphs} graphs, avg nodes {stats.avg_nodes:.2f}, "
        f"avg degree {stats.avg_degree:.3f}, avg diameter {stats.avg_diameter:.3f}"
    )
    return SbmDataset(params=params, train=train, val=val, test=test, stats=stats)
