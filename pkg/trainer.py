"""Node-classification model, Adam, training loop and the focal-length ablation runner."""

import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from pydantic import BaseModel, Field

from attention import FfgtLayerParams, GraphStructure, ffgt_layer, init_layer_params
from autodiff import (
    Tape,
    Tensor,
    add,
    cross_entropy,
    embedding_lookup,
    encode_checkpoint,
    linear,
    parameter,
    take_rows,
)
from cache import structure_cache
from config import ConfigError, ModelConfig, RunConfig, TrainConfig
from graph import Graph, lap_pe
from metrics import accuracy, balanced_accuracy, class_weights, mean_std
from sbm import LabeledSample

NUM_CLASSES = 2
SHUFFLE_STREAM_ID = 11
INIT_STREAM_ID = 12


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}, step {step}: loss={loss}")
        self.epoch = epoch
        self.step = step
        self.loss = loss


# Model -----------------------------------------------------------------------------


@dataclass
class ModelParams:
    config: ModelConfig
    feature_vocab: int
    node_embedding: Tensor
    pe_w: Tensor | None
    pe_b: Tensor | None
    layers: list[FfgtLayerParams]
    cls_w: Tensor
    cls_b: Tensor

    @property
    def virtual_feature_id(self) -> int | None:
        return self.feature_vocab if self.config.virtual_node else None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [("node_embedding", self.node_embedding)]
        if self.pe_w is not None:
            named += [("pe_w", self.pe_w), ("pe_b", self.pe_b)]
        for index, layer in enumerate(self.layers):
            named += layer.named_parameters(f"layer{index}")
        named += [("cls_w", self.cls_w), ("cls_b", self.cls_b)]
        return named

    def tensors(self) -> list[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def snapshot(self) -> list[np.ndarray]:
        return [tensor.data.copy() for tensor in self.tensors()]

    def restore(self, snapshot: Sequence[np.ndarray]) -> None:
        for tensor, values in zip(self.tensors(), snapshot):
            tensor.data[...] = values

    def checkpoint_bytes(self) -> bytes:
        return encode_checkpoint((name, tensor.data) for name, tensor in self.named_parameters())


def init_model(config: ModelConfig, feature_vocab: int, seed: int, num_edge_types: int = 1) -> ModelParams:
    config.head_dim  # raises ConfigError on non-divisible head split
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(INIT_STREAM_ID,)))
    d = config.dim
    rows = feature_vocab + (1 if config.virtual_node else 0)
    pe_w = pe_b = None
    if config.lap_pe_k:
        limit = np.sqrt(6.0 / (config.lap_pe_k + d))
        pe_w = parameter(rng.uniform(-limit, limit, size=(config.lap_pe_k, d)))
        pe_b = parameter(np.zeros(d))
    cls_limit = np.sqrt(6.0 / (d + NUM_CLASSES))
    return ModelParams(
        config=config,
        feature_vocab=feature_vocab,
        node_embedding=parameter(rng.normal(0.0, 1.0, size=(rows, d))),
        pe_w=pe_w,
        pe_b=pe_b,
        layers=[init_layer_params(config, rng, num_edge_types) for _ in range(config.layers)],
        cls_w=parameter(rng.uniform(-cls_limit, cls_limit, size=(d, NUM_CLASSES))),
        cls_b=parameter(np.zeros(NUM_CLASSES)),
    )


@dataclass(frozen=True, eq=False)
class PreparedSample:
    graph: Graph
    structure: GraphStructure
    positional: np.ndarray | None
    labels: np.ndarray
    num_real: int


def positional_encoding(graph: Graph, k: int) -> np.ndarray:
    """LapPE padded with zero columns when the graph is too small for k vectors."""

    vectors = np.zeros((graph.num_nodes, k))
    usable = min(k, graph.num_nodes - 1)
    if usable > 0:
        features = lap_pe(graph, usable)
        vectors[:, :usable] = features.vectors
        present = features.eigenvalues[features.eigenvalues > 0]
        if np.any(np.isclose(np.diff(present), 0.0)):
            logging.debug(
                f"LapPE on a {graph.num_nodes}-node graph has repeated eigenvalues; "
                "canonical signs do not fix that eigenspace, so permuted copies may encode differently"
            )
    return vectors


def prepare_sample(sample: LabeledSample, params: ModelParams) -> PreparedSample:
    config = params.config
    features = sample.graph.node_feature_ids
    if features.size and features.max() >= params.feature_vocab:
        raise ConfigError(
            f"sample uses feature id {int(features.max())} but the model vocabulary has {params.feature_vocab} ids"
        )
    fl = config.fl if config.focal_heads else None
    graph, structure = structure_cache.structure_for(
        sample.graph, fl, config.max_hop_bucket, params.virtual_feature_id
    )
    positional = None
    if config.lap_pe_k:
        positional = positional_encoding(sample.graph, config.lap_pe_k)
        if config.virtual_node:
            positional = np.vstack([positional, np.zeros((1, config.lap_pe_k))])
    return PreparedSample(
        graph=graph,
        structure=structure,
        positional=positional,
        labels=np.asarray(sample.labels, dtype=np.int64),
        num_real=sample.graph.num_nodes,
    )


def forward_prepared(prepared: PreparedSample, params: ModelParams) -> Tensor:
    h = embedding_lookup(params.node_embedding, prepared.graph.node_feature_ids)
    if prepared.positional is not None:
        h = add(h, linear(Tensor(prepared.positional), params.pe_w, params.pe_b))
    for layer in params.layers:
        h = ffgt_layer(h, layer, prepared.structure)
    if prepared.graph.num_nodes != prepared.num_real:
        h = take_rows(h, np.arange(prepared.num_real))
    return linear(h, params.cls_w, params.cls_b)


def forward_model(sample: LabeledSample, params: ModelParams) -> Tensor:
    """Per-node class logits for the real nodes of `sample`."""
    return forward_prepared(prepare_sample(sample, params), params)


# Optimizer -------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, tensors: Sequence[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(t.data) for t in tensors], v=[np.zeros_like(t.data) for t in tensors])


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update applied in place to `params`."""

    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must have the same length")
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for tensor, grad, m, v in zip(params, grads, state.m, state.v):
        if grad.shape != tensor.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match parameter {tensor.shape}")
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        tensor.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state


# Reports ---------------------------------------------------------------------------


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float | None = None


class GraphPredictions(BaseModel):
    graph_index: int
    labels: list[int]
    predicted: list[int]


class RunReport(BaseModel):
    run_id: str
    seed: int
    fl: int | None
    config: dict
    epochs: list[EpochRecord] = Field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    test_accuracy: float = 0.0
    test_balanced_accuracy: float = 0.0
    wall_clock_seconds: float = Field(0.0, exclude=True)
    predictions: list[GraphPredictions] = Field(default_factory=list, exclude=True)
    checkpoint: bytes = Field(b"", exclude=True, repr=False)

    @property
    def fl_label(self) -> str:
        return _fl_label(self.fl)

    def csv_rows(self) -> list[tuple]:
        rows = []
        for record in self.epochs:
            rows.append((self.run_id, self.fl_label, self.seed, record.epoch, "train", "loss", repr(record.train_loss)))
            rows.append(
                (self.run_id, self.fl_label, self.seed, record.epoch, "train", "accuracy", repr(record.train_accuracy))
            )
            if record.val_accuracy is not None:
                rows.append(
                    (self.run_id, self.fl_label, self.seed, record.epoch, "val", "accuracy", repr(record.val_accuracy))
                )
        rows.append((self.run_id, self.fl_label, self.seed, self.best_epoch, "test", "accuracy", repr(self.test_accuracy)))
        rows.append(
            (
                self.run_id,
                self.fl_label,
                self.seed,
                self.best_epoch,
                "test",
                "balanced_accuracy",
                repr(self.test_balanced_accuracy),
            )
        )
        return rows

    def to_text(self) -> str:
        lines = [
            f"run {self.run_id} (fl={self.fl_label}, seed={self.seed})",
            f"best epoch {self.best_epoch}: val accuracy {self.best_val_accuracy:.4f}",
            f"test accuracy {self.test_accuracy:.4f}, class-balanced {self.test_balanced_accuracy:.4f}",
            "",
            "epoch  train_loss  train_acc  val_acc",
        ]
        for record in self.epochs:
            val = "-" if record.val_accuracy is None else f"{record.val_accuracy:.4f}"
            lines.append(f"{record.epoch:5d}  {record.train_loss:10.6f}  {record.train_accuracy:9.4f}  {val}")
        return "\n".join(lines) + "\n"


def _fl_label(fl: int | None) -> str:
    return "vanilla" if fl is None else str(fl)


CSV_HEADER = ("run_id", "fl", "seed", "epoch", "split", "metric", "value")


def rows_to_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


# Training --------------------------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    grads: list[np.ndarray]
    predicted: np.ndarray


def graph_step(prepared: PreparedSample, params: ModelParams, weights: np.ndarray | None) -> StepResult:
    with Tape() as tape:
        logits = forward_prepared(prepared, params)
        loss = cross_entropy(logits, prepared.labels, weights)
    grads = tape.backward(loss, params.tensors())
    return StepResult(loss=float(loss.data), grads=grads, predicted=logits.data.argmax(axis=1))


def evaluate(prepared: Sequence[PreparedSample], params: ModelParams) -> tuple[float, float, list[GraphPredictions]]:
    """Accuracy and class-balanced accuracy pooled over all nodes of all graphs."""

    predictions = []
    for index, sample in enumerate(prepared):
        predicted = forward_prepared(sample, params).data.argmax(axis=1)
        predictions.append(
            GraphPredictions(graph_index=index, labels=sample.labels.tolist(), predicted=predicted.tolist())
        )
    labels = np.concatenate([np.asarray(p.labels) for p in predictions]) if predictions else np.zeros(0)
    predicted = np.concatenate([np.asarray(p.predicted) for p in predictions]) if predictions else np.zeros(0)
    return accuracy(predicted, labels), balanced_accuracy(predicted, labels, NUM_CLASSES), predictions


def _map(pool: ThreadPoolExecutor | None, fn, items):
    return list(pool.map(fn, items)) if pool is not None else [fn(item) for item in items]


def train(
    splits: Mapping[str, Sequence[LabeledSample]],
    config: RunConfig,
    jobs: int = 1,
    run_id: str = "run",
) -> RunReport:
    """Train on splits["train"], keep the best validation checkpoint, evaluate it on splits["test"]."""

    for name in ("train", "val", "test"):
        if not splits.get(name):
            raise ValueError(f"split '{name}' is empty")

    started = time.perf_counter()
    model_config, train_config = config.model, config.train
    params = init_model(model_config, config.sbm.feature_vocab, train_config.seed)
    tensors = params.tensors()
    state = AdamState.zeros_like(tensors)

    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        prepared = {name: _map(pool, lambda s: prepare_sample(s, params), splits[name]) for name in ("train", "val", "test")}
        train_labels = np.concatenate([p.labels for p in prepared["train"]])
        weights = class_weights(train_labels, NUM_CLASSES) if train_config.class_weighting else None

        report = RunReport(run_id=run_id, seed=train_config.seed, fl=_effective_fl(model_config), config=config.echo())
        shuffle = np.random.default_rng(np.random.SeedSequence(entropy=train_config.seed, spawn_key=(SHUFFLE_STREAM_ID,)))
        best_snapshot = params.snapshot()
        best_val = -1.0
        step = 0

        for epoch in range(1, train_config.epochs + 1):
            lr = _learning_rate(train_config, epoch)
            order = shuffle.permutation(len(prepared["train"]))
            epoch_loss = 0.0
            correct = total = 0
            for start in range(0, len(order), train_config.batch_size):
                batch = [prepared["train"][i] for i in order[start : start + train_config.batch_size]]
                results = _map(pool, lambda p: graph_step(p, params, weights), batch)
                step += 1

                batch_loss = sum(result.loss for result in results)
                if not np.isfinite(batch_loss):
                    logging.error(f"Non-finite loss in run {run_id} at epoch {epoch}, step {step}")
                    raise TrainingDivergedError(epoch, step, batch_loss)
                grads = [sum(result.grads[i] for result in results) / len(results) for i in range(len(tensors))]
                adam_step(tensors, grads, state, lr, train_config.beta1, train_config.beta2, train_config.adam_eps)

                epoch_loss += batch_loss
                for sample, result in zip(batch, results):
                    correct += int(np.sum(result.predicted == sample.labels))
                    total += sample.labels.size

            record = EpochRecord(
                epoch=epoch,
                train_loss=epoch_loss / len(order),
                train_accuracy=correct / total if total else 0.0,
            )
            if epoch % train_config.eval_every == 0 or epoch == train_config.epochs:
                record.val_accuracy, _, _ = evaluate(prepared["val"], params)
                if record.val_accuracy > best_val:
                    best_val = record.val_accuracy
                    best_snapshot = params.snapshot()
                    report.best_epoch = epoch
                    logging.info(f"[{run_id}] new best val accuracy {best_val:.4f} at epoch {epoch}")
            report.epochs.append(record)
            logging.info(
                f"[{run_id}] epoch {epoch}: train loss {record.train_loss:.5f}, "
                f"train acc {record.train_accuracy:.4f}, val acc {record.val_accuracy}"
            )

        params.restore(best_snapshot)
        report.best_val_accuracy = best_val
        report.test_accuracy, report.test_balanced_accuracy, report.predictions = evaluate(prepared["test"], params)
        report.checkpoint = params.checkpoint_bytes()
    finally:
        if pool is not None:
            pool.shutdown()

    report.wall_clock_seconds = time.perf_counter() - started
    logging.info(
        f"[{run_id}] test accuracy {report.test_accuracy:.4f} "
        f"(balanced {report.test_balanced_accuracy:.4f}) in {report.wall_clock_seconds:.1f}s"
    )
    return report


def _effective_fl(config: ModelConfig) -> int | None:
    return config.fl if config.focal_heads else None


def _learning_rate(config: TrainConfig, epoch: int) -> float:
    if config.warmup_epochs and epoch <= config.warmup_epochs:
        return config.lr * epoch / config.warmup_epochs
    return config.lr


# Ablation --------------------------------------------------------------------------


class AblationRow(BaseModel):
    label: str
    fl: int | None
    mean: float
    std: float
    n_seeds: int
    accuracies: list[float]


class AblationTable(BaseModel):
    rows: list[AblationRow]
    runs: list[RunReport] = Field(default_factory=list, exclude=True)

    def row(self, fl: int | None) -> AblationRow:
        for row in self.rows:
            if row.fl == fl:
                return row
        raise KeyError(fl)

    def to_csv(self) -> str:
        return rows_to_csv(
            ("label", "fl", "mean", "std", "n_seeds"),
            [(row.label, _fl_label(row.fl), repr(row.mean), repr(row.std), row.n_seeds) for row in self.rows],
        )

    def runs_csv(self) -> str:
        return rows_to_csv(CSV_HEADER, [row for run in self.runs for row in run.csv_rows()])


def ablate_fl(
    splits: Mapping[str, Sequence[LabeledSample]],
    config: RunConfig,
    fl_list: Sequence[int | None],
    seeds: Sequence[int],
    jobs: int = 1,
) -> AblationTable:
    """Mean/std test accuracy per focal length; `None` is the all-full-range backbone."""

    if not fl_list:
        raise ValueError("fl_list must not be empty")
    if not seeds:
        raise ValueError("seeds must not be empty")

    rows, runs = [], []
    for fl in fl_list:
        label = "vanilla" if fl is None else f"fl={fl}"
        accuracies = []
        for seed in seeds:
            run_config = config.model_copy(
                update={
                    "model": config.model.with_fl(fl),
                    "train": config.train.model_copy(update={"seed": seed}),
                }
            )
            report = train(splits, run_config, jobs=jobs, run_id=f"{label}-seed{seed}")
            runs.append(report)
            accuracies.append(report.test_accuracy)
        mean, std = mean_std(accuracies)
        rows.append(AblationRow(label=label, fl=fl, mean=mean, std=std, n_seeds=len(seeds), accuracies=accuracies))
        logging.info(f"Ablation {label}: {mean:.4f} ± {std:.4f} over {len(seeds)} seeds")
    return AblationTable(rows=rows, runs=runs)
