import json
import logging
from pathlib import Path
from typing import Any, Iterable, Sequence

import aiofiles
import numpy as np
from PIL import Image
from pydantic import BaseModel, ValidationError

from config import RunConfig, SbmSection
from graph import Graph, dumps_graph, loads_graph
from sbm import DatasetStats, LabeledSample, SbmDataset
from trainer import CSV_HEADER, AblationTable, GraphPredictions, RunReport, rows_to_csv

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"


class ManifestMismatchError(ValueError):
    """The data dir was generated with different SBM parameters than the config asks for."""


class DatasetManifest(BaseModel):
    params: dict[str, Any]
    seed: int
    counts: dict[str, int]
    stats: DatasetStats
    config: dict[str, Any]


def split_path(data_dir: str | Path, split: str) -> Path:
    return Path(data_dir) / f"{split}.jsonl"


async def write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    async with aiofiles.open(path, "w", encoding="utf-8", newline="\n") as f:
        await f.write(text)
    return path


async def write_bytes(path: str | Path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    async with aiofiles.open(path, "wb") as f:
        await f.write(data)
    return path


async def write_graphs(path: str | Path, graphs: Iterable[Graph | LabeledSample]) -> Path:
    """One compact JSON object per line, newline-terminated."""

    lines = [dumps_graph(g.graph if isinstance(g, LabeledSample) else g) for g in graphs]
    return await write_text(path, "".join(f"{line}\n" for line in lines))


async def read_graphs(path: str | Path) -> list[Graph]:
    async with aiofiles.open(path, "r", encoding="utf-8") as f:
        text = await f.read()
    graphs = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            graphs.append(loads_graph(line))
        except ValueError as e:
            raise ValueError(f"{path}:{number}: invalid graph record: {e}") from e
    return graphs


def _manifest_params(section: SbmSection) -> dict[str, Any]:
    return section.generator_params().model_dump(mode="json")


def _manifest_counts(section: SbmSection) -> dict[str, int]:
    return {"train": section.n_train, "val": section.n_val, "test": section.n_test}


async def save_dataset(dataset: SbmDataset, out_dir: str | Path, config: RunConfig) -> Path:
    """Write the three split files and the manifest; returns the manifest path."""

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for split, samples in dataset.splits().items():
        await write_graphs(split_path(out_dir, split), samples)

    manifest = DatasetManifest(
        params=dataset.params.model_dump(mode="json"),
        seed=dataset.params.seed,
        counts={split: len(samples) for split, samples in dataset.splits().items()},
        stats=dataset.stats,
        config=config.echo(),
    )
    path = await write_text(out_dir / MANIFEST_NAME, manifest.model_dump_json(indent=2) + "\n")
    logging.info(f"Dataset written to {out_dir} ({sum(manifest.counts.values())} graphs)")
    return path


async def read_manifest(data_dir: str | Path) -> DatasetManifest:
    path = Path(data_dir) / MANIFEST_NAME
    async with aiofiles.open(path, "r", encoding="utf-8") as f:
        text = await f.read()
    try:
        return DatasetManifest.model_validate_json(text)
    except ValidationError as e:
        raise ManifestMismatchError(f"{path} is not a valid dataset manifest: {e.error_count()} errors") from e


def check_manifest(manifest: DatasetManifest, section: SbmSection) -> None:
    expected_params, expected_counts = _manifest_params(section), _manifest_counts(section)
    mismatched = sorted(key for key in expected_params if manifest.params.get(key) != expected_params[key])
    mismatched += sorted(f"n_{split}" for split in SPLITS if manifest.counts.get(split) != expected_counts[split])
    if mismatched:
        raise ManifestMismatchError(f"data dir manifest differs from [sbm] in: {', '.join(mismatched)}")


async def load_dataset(data_dir: str | Path, section: SbmSection | None = None) -> dict[str, list[LabeledSample]]:
    """Read the split files, validating the manifest against `section` when given."""

    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data dir {data_dir} does not exist")
    manifest = await read_manifest(data_dir)
    if section is not None:
        check_manifest(manifest, section)

    splits = {}
    for split in SPLITS:
        samples = []
        for index, graph in enumerate(await read_graphs(split_path(data_dir, split))):
            if graph.node_labels is None:
                raise ValueError(f"{split} graph {index} has no node labels")
            samples.append(LabeledSample(graph=graph, labels=graph.node_labels, stream_key=(SPLITS.index(split), index)))
        splits[split] = samples
    return splits


def predictions_csv(predictions: Sequence[GraphPredictions]) -> str:
    rows = [
        (prediction.graph_index, node, label, predicted)
        for prediction in predictions
        for node, (label, predicted) in enumerate(zip(prediction.labels, prediction.predicted))
    ]
    return rows_to_csv(("graph_index", "node", "label", "prediction"), rows)


async def save_run_report(report: RunReport, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    return [
        await write_text(out_dir / "report.json", report.model_dump_json(indent=2) + "\n"),
        await write_text(out_dir / "report.txt", report.to_text()),
        await write_text(out_dir / "metrics.csv", rows_to_csv(CSV_HEADER, report.csv_rows())),
        await write_text(out_dir / "predictions.csv", predictions_csv(report.predictions)),
        await write_bytes(out_dir / "checkpoint.bin", report.checkpoint),
    ]


async def save_ablation(table: AblationTable, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    return [
        await write_text(out_dir / "ablation.csv", table.to_csv()),
        await write_text(out_dir / "runs.csv", table.runs_csv()),
        await write_text(out_dir / "ablation.json", json.dumps(table.model_dump(mode="json"), indent=2) + "\n"),
    ]


def save_mask_png(dense: np.ndarray, path: str | Path, cell: int = 8) -> Path:
    """Render a 0/1 mask as black (in scope) and white squares."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.where(np.asarray(dense, dtype=bool), 0, 255).astype(np.uint8)
    pixels = np.kron(pixels, np.ones((cell, cell), dtype=np.uint8))
    with Image.fromarray(pixels) as img:
        img.save(path, format="PNG")
    return path
