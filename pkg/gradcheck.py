"""Central-difference gradient checks for every tape primitive and for a full two-layer model."""

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from pydantic import BaseModel

import autodiff as ad
from config import ModelConfig, settings
from graph import Graph, is_connected
from sbm import LabeledSample
from trainer import forward_prepared, init_model, prepare_sample

Forward = Callable[[list[ad.Tensor]], ad.Tensor]


@dataclass
class CheckCase:
    inputs: list[ad.Tensor]
    forward: Forward
    scalar_output: bool = False


def numeric_gradient(loss: Callable[[], float], values: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of `loss` w.r.t. `values`, perturbed in place and restored."""

    grad = np.zeros_like(values)
    flat, flat_grad = values.reshape(-1), grad.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + eps
        plus = loss()
        flat[index] = original - eps
        minus = loss()
        flat[index] = original
        flat_grad[index] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)))


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    # relu has a kink at 0; keep every coordinate well outside +-eps of it
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _params(*arrays: np.ndarray) -> list[ad.Tensor]:
    return [ad.parameter(array) for array in arrays]


def _case_add(rng):
    return CheckCase(_params(rng.normal(size=(4, 3)), rng.normal(size=(4, 3))), lambda t: ad.add(t[0], t[1]))


def _case_add_row(rng):
    return CheckCase(_params(rng.normal(size=(4, 3)), rng.normal(size=3)), lambda t: ad.add(t[0], t[1]))


def _case_sub(rng):
    return CheckCase(_params(rng.normal(size=(3, 5)), rng.normal(size=(3, 5))), lambda t: ad.sub(t[0], t[1]))


def _case_mul(rng):
    return CheckCase(_params(rng.normal(size=(4, 4)), rng.normal(size=(4, 4))), lambda t: ad.mul(t[0], t[1]))


def _case_scale(rng):
    factor = float(rng.normal())
    return CheckCase(_params(rng.normal(size=(3, 4))), lambda t: ad.scale(t[0], factor))


def _case_relu(rng):
    return CheckCase(_params(_away_from_zero(rng, (5, 4))), lambda t: ad.relu(t[0]))


def _case_sum_all(rng):
    return CheckCase(_params(rng.normal(size=(3, 4))), lambda t: ad.sum_all(t[0]), scalar_output=True)


def _case_matmul(rng):
    return CheckCase(_params(rng.normal(size=(4, 3)), rng.normal(size=(3, 5))), lambda t: ad.matmul(t[0], t[1]))


def _case_transpose(rng):
    return CheckCase(_params(rng.normal(size=(3, 5))), lambda t: ad.transpose(t[0]))


def _case_linear(rng):
    return CheckCase(
        _params(rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)),
        lambda t: ad.linear(t[0], t[1], t[2]),
    )


def _case_concat(rng):
    return CheckCase(
        _params(rng.normal(size=(4, 2)), rng.normal(size=(4, 3)), rng.normal(size=(4, 1))),
        lambda t: ad.concat(t),
    )


def _case_take_rows(rng):
    rows = rng.integers(0, 5, size=7)
    return CheckCase(_params(rng.normal(size=(5, 3))), lambda t: ad.take_rows(t[0], rows))


def _case_embedding(rng):
    ids = rng.integers(0, 4, size=9)
    return CheckCase(_params(rng.normal(size=(4, 3))), lambda t: ad.embedding_lookup(t[0], ids))


def _case_lookup_scalar(rng):
    ids = rng.integers(0, 6, size=(5, 5))
    where = rng.random((5, 5)) < 0.5
    return CheckCase(_params(rng.normal(size=(6, 3))), lambda t: ad.lookup_scalar(t[0], ids, 1, where=where))


def _case_softmax(rng):
    return CheckCase(_params(rng.normal(size=(5, 5))), lambda t: ad.masked_row_softmax(t[0]))


def _case_masked_softmax(rng):
    mask = rng.random((6, 6)) < 0.5
    np.fill_diagonal(mask, True)
    return CheckCase(_params(rng.normal(size=(6, 6))), lambda t: ad.masked_row_softmax(t[0], mask))


def _case_layer_norm(rng):
    return CheckCase(
        _params(rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)),
        lambda t: ad.layer_norm(t[0], t[1], t[2]),
    )


def _case_cross_entropy(rng):
    labels = rng.integers(0, 3, size=6)
    weights = rng.uniform(0.5, 2.0, size=3)
    return CheckCase(
        _params(rng.normal(size=(6, 3))),
        lambda t: ad.cross_entropy(t[0], labels, weights),
        scalar_output=True,
    )


PRIMITIVE_CASES: dict[str, Callable[[np.random.Generator], CheckCase]] = {
    "add": _case_add,
    "add_row_broadcast": _case_add_row,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "relu": _case_relu,
    "sum_all": _case_sum_all,
    "matmul": _case_matmul,
    "transpose": _case_transpose,
    "linear": _case_linear,
    "concat": _case_concat,
    "take_rows": _case_take_rows,
    "embedding_lookup": _case_embedding,
    "lookup_scalar": _case_lookup_scalar,
    "row_softmax": _case_softmax,
    "masked_row_softmax": _case_masked_softmax,
    "layer_norm": _case_layer_norm,
    "cross_entropy": _case_cross_entropy,
}


def check_case(case: CheckCase, rng: np.random.Generator, eps: float) -> float:
    """Max relative error between tape gradients and central differences for one case."""

    projection: np.ndarray | None = None

    def reduce(out: ad.Tensor) -> ad.Tensor:
        nonlocal projection
        if case.scalar_output:
            return out
        if projection is None:
            projection = rng.normal(size=out.shape)
        return ad.sum_all(ad.mul(out, ad.Tensor(projection)))

    with ad.Tape() as tape:
        loss = reduce(case.forward(case.inputs))
    analytic = tape.backward(loss, case.inputs)

    def loss_value() -> float:
        return float(reduce(case.forward(case.inputs)).data)

    errors = [
        relative_error(grad, numeric_gradient(loss_value, tensor.data, eps))
        for tensor, grad in zip(case.inputs, analytic)
    ]
    return max(errors, default=0.0)


def _random_connected_graph(rng: np.random.Generator, n: int, p: float) -> Graph:
    while True:
        upper = np.argwhere(np.triu(rng.random((n, n)) < p, k=1))
        graph = Graph.from_edges(n, upper, rng.integers(0, 3, size=n), rng.integers(0, 2, size=n))
        if is_connected(graph):
            return graph


def model_case(rng: np.random.Generator, virtual_node: bool) -> CheckCase:
    """Two compound layers with one full and one focal head, gating, LapPE and class weights."""

    config = ModelConfig(
        dim=8,
        layers=2,
        full_heads=1,
        focal_heads=1,
        fl=1,
        mlp_hidden=8,
        gate_enabled=True,
        max_hop_bucket=3,
        lap_pe_k=2,
        virtual_node=virtual_node,
    )
    graph = _random_connected_graph(rng, 7, 0.35)
    sample = LabeledSample(graph=graph, labels=graph.node_labels)
    params = init_model(config, feature_vocab=3, seed=int(rng.integers(2**31)))
    # move away from the structured initial point (zero tables, unit gates)
    for tensor in params.tensors():
        tensor.data += rng.normal(scale=0.3, size=tensor.shape)
    prepared = prepare_sample(sample, params)
    weights = rng.uniform(0.5, 2.0, size=2)

    def forward(_: list[ad.Tensor]) -> ad.Tensor:
        return ad.cross_entropy(forward_prepared(prepared, params), prepared.labels, weights)

    return CheckCase(params.tensors(), forward, scalar_output=True)


MODEL_CASES: dict[str, Callable[[np.random.Generator], CheckCase]] = {
    "ffgt_model_2_layer": lambda rng: model_case(rng, virtual_node=False),
    "ffgt_model_2_layer_virtual": lambda rng: model_case(rng, virtual_node=True),
}


class GradcheckRow(BaseModel):
    name: str
    max_rel_error: float
    passed: bool


class GradcheckTable(BaseModel):
    seeds: list[int]
    eps: float
    tolerance: float
    rows: list[GradcheckRow]

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows)

    def to_text(self) -> str:
        width = max(len(row.name) for row in self.rows)
        lines = [f"{'check':<{width}}  max_rel_error  result"]
        for row in self.rows:
            lines.append(f"{row.name:<{width}}  {row.max_rel_error:13.3e}  {'PASS' if row.passed else 'FAIL'}")
        lines.append(f"{'all' if self.passed else 'some'} checks {'passed' if self.passed else 'FAILED'}")
        return "\n".join(lines) + "\n"


def run_gradcheck(
    seeds: Sequence[int],
    eps: float | None = None,
    tolerance: float | None = None,
    include_model: bool = True,
) -> GradcheckTable:
    """One row per primitive (and per model variant), worst error over `seeds`."""

    eps = settings.gradcheck_eps if eps is None else eps
    tolerance = settings.gradcheck_tolerance if tolerance is None else tolerance
    cases = dict(PRIMITIVE_CASES)
    if include_model:
        cases.update(MODEL_CASES)

    rows = []
    for index, (name, build) in enumerate(cases.items()):
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
            worst = max(worst, check_case(build(rng), rng, eps))
        passed = bool(worst < tolerance)
        if not passed:
            logging.error(f"Gradient check failed for {name}: max relative error {worst:.3e}")
        rows.append(GradcheckRow(name=name, max_rel_error=worst, passed=passed))
    return GradcheckTable(seeds=list(seeds), eps=eps, tolerance=tolerance, rows=rows)
