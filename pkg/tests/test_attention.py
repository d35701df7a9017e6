import math

import numpy as np
import pytest

from attention import (
    BiasTables,
    FfgtLayerParams,
    GateTable,
    HeadParams,
    PairCounter,
    attention_head,
    attention_weights,
    bucket_ids,
    build_bias_matrix,
    build_gate_matrix,
    build_structure,
    ffgt_layer,
    init_layer_params,
    khop_mpnn_reference,
    sparse_focal_forward,
    structure_bias,
)
from autodiff import Tensor, parameter
from config import ConfigError
from graph import UNREACHABLE, VIRTUAL, Graph, diameter, focal_mask, hop_matrix, permute_graph
from helpers import chain_graph, random_connected_graph, random_graph, small_model


def _head(rng, d, d_h, zero_qk=False) -> HeadParams:
    w_q = np.zeros((d, d_h)) if zero_qk else rng.normal(size=(d, d_h))
    w_k = np.zeros((d, d_h)) if zero_qk else rng.normal(size=(d, d_h))
    return HeadParams(parameter(w_q), parameter(w_k), parameter(rng.normal(size=(d, d_h))))


def _random_tables(rng, max_hop, heads, edge_types=1) -> BiasTables:
    return BiasTables(
        hop_bias=parameter(rng.normal(size=(max_hop + 4, heads))),
        edge_bias=parameter(rng.normal(size=(edge_types, heads))),
        max_hop=max_hop,
    )


def _randomize(params: FfgtLayerParams, rng) -> FfgtLayerParams:
    for _, tensor in params.named_parameters():
        tensor.data += rng.normal(scale=0.5, size=tensor.shape)
    return params


def test_bucket_ids_map():
    hops = np.array([0, 1, 10, 11, 50, UNREACHABLE, VIRTUAL])
    assert bucket_ids(hops, 10).tolist() == [0, 1, 10, 11, 11, 12, 13]


def test_uniform_attention_with_zero_query_key():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(5, 4)))
    head = _head(rng, 4, 2, zero_qk=True)
    out = attention_head(x, head).data
    values = x.data @ head.w_v.data
    np.testing.assert_allclose(out, np.tile(values.mean(axis=0), (5, 1)), atol=1e-14)


def test_identity_mask_returns_values():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(6, 4)))
    head = _head(rng, 4, 2)
    mask = focal_mask(hop_matrix(chain_graph(6)), 0)
    np.testing.assert_allclose(attention_head(x, head, mask=mask).data, x.data @ head.w_v.data, atol=1e-15)


def test_mask_at_diameter_matches_full_attention():
    rng = np.random.default_rng(2)
    graph = random_connected_graph(rng, 7, 0.4)
    hops = hop_matrix(graph)
    x = Tensor(rng.normal(size=(7, 8)))
    head = _head(rng, 8, 4)
    bias = build_bias_matrix(hops, graph, _random_tables(rng, 4, 1), 0)
    full = attention_head(x, head, bias)
    focal = attention_head(x, head, bias, mask=focal_mask(hops, diameter(hops)))
    np.testing.assert_allclose(focal.data, full.data, atol=1e-12)


def test_focal_equals_full_head_on_connected_graphs_at_diameter():
    rng = np.random.default_rng(3)
    for _ in range(50):
        graph = random_connected_graph(rng, int(rng.integers(3, 20)), 0.3)
        hops = hop_matrix(graph)
        x = Tensor(rng.normal(size=(graph.num_nodes, 6)))
        head = _head(rng, 6, 3)
        bias = build_bias_matrix(hops, graph, _random_tables(rng, 3, 1), 0)
        mask = focal_mask(hops, diameter(hops) + int(rng.integers(0, 2)))
        np.testing.assert_allclose(
            attention_head(x, head, bias, mask=mask).data, attention_head(x, head, bias).data, atol=1e-12
        )


def test_bias_matrix_examples():
    graph = Graph.from_edges(2, [(0, 1)])
    hops = hop_matrix(graph)
    zero = BiasTables(parameter(np.zeros((7, 1))), parameter(np.zeros((1, 1))), max_hop=3)
    assert (build_bias_matrix(hops, graph, zero, 0).data == 0).all()

    hop_bias = np.zeros((7, 1))
    hop_bias[1, 0] = 0.5
    tables = BiasTables(parameter(hop_bias), parameter(np.array([[0.25]])), max_hop=3)
    bias = build_bias_matrix(hops, graph, tables, 0).data
    assert bias[0, 1] == bias[1, 0] == 0.75
    assert bias[0, 0] == 0.0


def test_bias_matrix_matches_per_pair_recomputation():
    rng = np.random.default_rng(4)
    graph = random_graph(rng, 15, 0.2, edge_types=3)
    hops = hop_matrix(graph)
    tables = _random_tables(rng, 2, 2, edge_types=3)
    types = {}
    for (u, v), t in zip(graph.edges.tolist(), graph.edge_type_ids.tolist()):
        types[(u, v)] = types[(v, u)] = t
    for head in range(2):
        bias = build_bias_matrix(hops, graph, tables, head).data
        for i in range(15):
            for j in range(15):
                h = hops.hops[i, j]
                bucket = 4 if h == UNREACHABLE else min(h, 3)
                expected = tables.hop_bias.data[bucket, head]
                if h == 1:
                    expected += tables.edge_bias.data[types[(i, j)], head]
                assert bias[i, j] == pytest.approx(expected, abs=1e-15)


def test_attention_rows_sum_to_one_and_gate_disabled_is_identity():
    rng = np.random.default_rng(5)
    graph = random_graph(rng, 12, 0.25)
    structure = build_structure(graph, hop_matrix(graph), 1, 4)
    x = Tensor(rng.normal(size=(12, 4)))
    head = _head(rng, 4, 2)
    tables = _random_tables(rng, 4, 1)
    bias = structure_bias(structure, tables, 0)

    weights = attention_weights(x, head, bias, structure.mask).data
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)
    assert (weights[~structure.mask.dense] == 0).all()

    assert build_gate_matrix(structure, GateTable(), 0) is None
    ones = GateTable(parameter(np.ones((8, 1))))
    gated = attention_head(x, head, bias, build_gate_matrix(structure, ones, 0), structure.mask)
    plain = attention_head(x, head, bias, None, structure.mask)
    assert gated.data.tobytes() == plain.data.tobytes()


def test_layer_without_focal_heads_ignores_mask():
    rng = np.random.default_rng(6)
    config = small_model(full_heads=1, focal_heads=0, fl=None)
    params = _randomize(init_layer_params(config, rng), rng)
    graph = random_graph(rng, 10, 0.3)
    hops = hop_matrix(graph)
    x = Tensor(rng.normal(size=(10, 8)))
    without_mask = ffgt_layer(x, params, build_structure(graph, hops, None, 4)).data
    with_mask = ffgt_layer(x, params, build_structure(graph, hops, 1, 4)).data
    assert without_mask.tobytes() == with_mask.tobytes()


def test_focal_heads_at_diameter_duplicate_full_heads():
    rng = np.random.default_rng(7)
    config = small_model(full_heads=1, focal_heads=1, fl=1)
    compound = _randomize(init_layer_params(config, rng), rng)
    all_full = FfgtLayerParams(
        full_heads=compound.full_heads + compound.focal_heads,
        focal_heads=[],
        bias=compound.bias,
        gate=compound.gate,
        merge_w=compound.merge_w,
        merge_b=compound.merge_b,
        mlp_w1=compound.mlp_w1,
        mlp_b1=compound.mlp_b1,
        mlp_w2=compound.mlp_w2,
        mlp_b2=compound.mlp_b2,
        norm1_gamma=compound.norm1_gamma,
        norm1_beta=compound.norm1_beta,
        norm2_gamma=compound.norm2_gamma,
        norm2_beta=compound.norm2_beta,
    )
    graph = random_connected_graph(rng, 9, 0.35)
    hops = hop_matrix(graph)
    x = Tensor(rng.normal(size=(9, 8)))
    focal = ffgt_layer(x, compound, build_structure(graph, hops, diameter(hops), 4)).data
    full = ffgt_layer(x, all_full, build_structure(graph, hops, None, 4)).data
    np.testing.assert_allclose(focal, full, atol=1e-12)


def test_layer_is_permutation_equivariant():
    rng = np.random.default_rng(8)
    config = small_model(full_heads=2, focal_heads=2, fl=2, gate_enabled=True)
    params = _randomize(init_layer_params(config, rng, num_edge_types=2), rng)
    graph = random_graph(rng, 14, 0.2, edge_types=2)
    perm = rng.permutation(14)
    permuted = permute_graph(graph, perm)
    x = rng.normal(size=(14, 8))
    x_perm = np.empty_like(x)
    x_perm[perm] = x

    out = ffgt_layer(Tensor(x), params, build_structure(graph, hop_matrix(graph), 2, 4)).data
    out_perm = ffgt_layer(Tensor(x_perm), params, build_structure(permuted, hop_matrix(permuted), 2, 4)).data
    np.testing.assert_allclose(out_perm[perm], out, atol=1e-9)


def test_layer_configuration_errors():
    with pytest.raises(ConfigError, match="divisible"):
        init_layer_params(small_model(full_heads=2, focal_heads=1), np.random.default_rng(0))

    rng = np.random.default_rng(9)
    params = init_layer_params(small_model(), rng)
    graph = chain_graph(4)
    with pytest.raises(ConfigError, match="focal length"):
        ffgt_layer(Tensor(rng.normal(size=(4, 8))), params, build_structure(graph, hop_matrix(graph), None, 4))


def test_khop_reference_examples():
    rng = np.random.default_rng(10)
    graph = random_graph(rng, 10, 0.3)
    hops = hop_matrix(graph)
    x, w_v = rng.normal(size=(10, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(khop_mpnn_reference(x, [0.3], w_v, hops, 0), x @ w_v, atol=1e-14)

    out = khop_mpnn_reference(x, np.zeros(3), w_v, hops, 2)
    values = x @ w_v
    for i in range(10):
        ego = np.flatnonzero(hops.hops[i] <= 2)
        np.testing.assert_allclose(out[i], values[ego].mean(axis=0), atol=1e-14)


def test_focal_head_degenerates_to_khop_mpnn():
    rng = np.random.default_rng(11)
    for _ in range(50):
        fl = int(rng.integers(0, 4))
        graph = random_graph(rng, int(rng.integers(2, 25)), 0.2)
        hops = hop_matrix(graph)
        per_distance = rng.normal(size=fl + 1)
        hop_bias = np.zeros((8, 1))
        hop_bias[: fl + 1, 0] = per_distance
        tables = BiasTables(parameter(hop_bias), parameter(np.zeros((1, 1))), max_hop=4)
        head = _head(rng, 5, 3, zero_qk=True)
        x = Tensor(rng.normal(size=(graph.num_nodes, 5)))
        structure = build_structure(graph, hops, fl, 4)

        focal = attention_head(x, head, structure_bias(structure, tables, 0), mask=structure.mask).data
        reference = khop_mpnn_reference(x, per_distance, head.w_v, hops, fl)
        np.testing.assert_allclose(focal, reference, atol=1e-10)


def test_sparse_forward_on_long_chain_touches_linear_pairs():
    rng = np.random.default_rng(12)
    n = 200
    graph = chain_graph(n)
    hops = hop_matrix(graph)
    mask = focal_mask(hops, 1)
    x = Tensor(rng.normal(size=(n, 8)))
    head = _head(rng, 8, 4)
    counter = PairCounter()

    sparse = sparse_focal_forward(x, head, hops, mask, counter=counter)
    dense = attention_head(x, head, mask=mask).data
    np.testing.assert_allclose(sparse, dense, atol=1e-12)
    assert counter.touched == 3 * n - 2
    assert counter.touched < 5 * n


def test_sparse_forward_fl_zero_returns_values():
    rng = np.random.default_rng(13)
    graph = random_graph(rng, 10, 0.3)
    hops = hop_matrix(graph)
    x = Tensor(rng.normal(size=(10, 4)))
    head = _head(rng, 4, 2)
    out = sparse_focal_forward(x, head, hops, focal_mask(hops, 0))
    np.testing.assert_allclose(out, x.data @ head.w_v.data, atol=1e-15)


def test_sparse_forward_matches_dense_with_bias_and_gate():
    rng = np.random.default_rng(14)
    for _ in range(5):
        graph = random_graph(rng, 60, 0.08, edge_types=2)
        structure = build_structure(graph, hop_matrix(graph), 2, 4)
        tables = _random_tables(rng, 4, 2, edge_types=2)
        gate = GateTable(parameter(rng.uniform(0.5, 1.5, size=(8, 2))))
        x = Tensor(rng.normal(size=(60, 6)))
        head = _head(rng, 6, 3)

        dense = attention_head(
            x, head, structure_bias(structure, tables, 1), build_gate_matrix(structure, gate, 1), structure.mask
        ).data
        sparse = sparse_focal_forward(
            x,
            head,
            structure.hops,
            structure.mask,
            tables=tables,
            head_index=1,
            edge_types=structure.edge_types,
            gate=gate,
        )
        np.testing.assert_allclose(sparse, dense, atol=1e-12)


def test_head_width_uses_per_head_scaling():
    rng = np.random.default_rng(15)
    x = Tensor(rng.normal(size=(3, 4)))
    head = _head(rng, 4, 2)
    q, k = x.data @ head.w_q.data, x.data @ head.w_k.data
    scores = q @ k.T / math.sqrt(2)
    expected = np.exp(scores - scores.max(axis=1, keepdims=True))
    expected /= expected.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(attention_weights(x, head, None, None).data, expected, atol=1e-14)
