import asyncio
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Iterator, Optional

import typer

from config import ConfigError, RunConfig, load_run_config, parse_fl, settings
from gradcheck import run_gradcheck
from graph import Graph, focal_mask, hop_matrix
from sbm import GenerationExhaustedError, dataset_stats, generate_dataset
from storage import (
    SPLITS,
    ManifestMismatchError,
    load_dataset,
    read_graphs,
    save_ablation,
    save_dataset,
    save_mask_png,
    save_run_report,
    split_path,
)
from trainer import TrainingDivergedError, ablate_fl, train

EXIT_GRADCHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_MANIFEST_MISMATCH = 4
EXIT_DIVERGED = 5

app = typer.Typer(
    name="ffgt",
    help="Focal-length graph transformer workbench: SBM-PATTERN data, training, FL ablation, gradient checks.",
    no_args_is_help=True,
    add_completion=False,
)


@dataclass
class CliState:
    config_path: Path | None = None
    seed: int | None = None
    jobs: int | None = None
    out: Path | None = None

    def run_config(self) -> RunConfig:
        config = load_run_config(self.config_path)
        return config if self.seed is None else config.with_seed(self.seed)

    @property
    def worker_count(self) -> int:
        return self.jobs if self.jobs is not None else settings.jobs


def _fail(code: int, message: str) -> None:
    typer.echo(f"error: {message}", err=True)
    raise typer.Exit(code=code)


@contextmanager
def _exit_codes() -> Iterator[None]:
    try:
        yield
    except ManifestMismatchError as e:
        _fail(EXIT_MANIFEST_MISMATCH, str(e))
    except ConfigError as e:
        _fail(EXIT_USAGE, str(e))
    except ValueError as e:
        _fail(EXIT_USAGE, str(e))
    except TrainingDivergedError as e:
        _fail(EXIT_DIVERGED, str(e))
    except GenerationExhaustedError as e:
        _fail(EXIT_USAGE, str(e))
    except OSError as e:
        _fail(EXIT_IO, str(e))


@app.callback()
def common(
    ctx: typer.Context,
    config: Annotated[Optional[Path], typer.Option("--config", help="Run config file with [sbm]/[model]/[train].")] = None,
    seed: Annotated[Optional[int], typer.Option("--seed", min=0, help="Overrides sbm.seed and train.seed.")] = None,
    jobs: Annotated[Optional[int], typer.Option("--jobs", min=1, help="Worker cap for per-graph parallelism.")] = None,
    out: Annotated[Optional[Path], typer.Option("--out", help="Output directory.")] = None,
):
    ctx.obj = CliState(config_path=config, seed=seed, jobs=jobs, out=out)


@app.command()
def gen(ctx: typer.Context):
    """Generate train/val/test split files and a manifest."""

    state: CliState = ctx.obj
    with _exit_codes():
        config = state.run_config()
        out_dir = state.out or Path(settings.data_dir)
        section = config.sbm
        dataset = generate_dataset(
            section.generator_params(), section.n_train, section.n_val, section.n_test, jobs=state.worker_count
        )
        manifest = asyncio.run(save_dataset(dataset, out_dir, config))
        typer.echo(f"wrote {manifest}")
        typer.echo(dataset.stats.model_dump_json(indent=2))


@app.command()
def stats(ctx: typer.Context, path: Annotated[Path, typer.Argument(help="Data dir or a single graph file.")]):
    """Print average node count, degree and diameter."""

    with _exit_codes():
        if path.is_dir():
            graphs: list[Graph] = []
            for split in SPLITS:
                graphs += asyncio.run(read_graphs(split_path(path, split)))
        else:
            graphs = asyncio.run(read_graphs(path))
        if not graphs:
            _fail(EXIT_USAGE, f"{path} contains no graphs")
        typer.echo(dataset_stats(graphs).model_dump_json(indent=2))


@app.command("train")
def train_command(
    ctx: typer.Context,
    data_dir: Annotated[Optional[Path], typer.Argument(help="Directory written by `gen`.")] = None,
):
    """Train one model and write report.json/.txt, metrics.csv, predictions.csv and checkpoint.bin."""

    state: CliState = ctx.obj
    with _exit_codes():
        config = state.run_config()
        splits = asyncio.run(load_dataset(data_dir or Path(settings.data_dir), config.sbm))
        report = train(splits, config, jobs=state.worker_count, run_id=f"seed{config.train.seed}")
        paths = asyncio.run(save_run_report(report, state.out or Path(settings.out_dir)))
        typer.echo(report.to_text())
        for path in paths:
            typer.echo(f"wrote {path}")


@app.command()
def ablate(
    ctx: typer.Context,
    data_dir: Annotated[Optional[Path], typer.Argument(help="Directory written by `gen`.")] = None,
    fl: Annotated[Optional[str], typer.Option("--fl", help="Comma list of focal lengths, e.g. vanilla,1,2,3.")] = None,
    seeds: Annotated[Optional[str], typer.Option("--seeds", help="Comma list of training seeds.")] = None,
):
    """Mean and std test accuracy per focal length over a seed list."""

    state: CliState = ctx.obj
    with _exit_codes():
        config = state.run_config()
        try:
            fl_list = [parse_fl(item) for item in fl.split(",")] if fl else config.train.ablate_fl
            seed_list = [int(item) for item in seeds.split(",")] if seeds else config.train.ablate_seeds
        except ValueError as e:
            raise ConfigError(f"bad --fl/--seeds list: {e}") from e
        if not fl_list or not seed_list:
            raise ConfigError("--fl and --seeds need at least one entry")

        splits = asyncio.run(load_dataset(data_dir or Path(settings.data_dir), config.sbm))
        table = ablate_fl(splits, config, fl_list, seed_list, jobs=state.worker_count)
        paths = asyncio.run(save_ablation(table, state.out or Path(settings.out_dir)))
        typer.echo(table.to_csv(), nl=False)
        for path in paths:
            typer.echo(f"wrote {path}")


@app.command()
def gradcheck(
    ctx: typer.Context,
    repeats: Annotated[int, typer.Option("--repeats", min=1, help="Number of consecutive seeds checked.")] = 10,
):
    """Central-difference check of every primitive and the full model; exit 1 on any failure."""

    state: CliState = ctx.obj
    start = state.seed or 0
    table = run_gradcheck(range(start, start + repeats))
    typer.echo(table.to_text(), nl=False)
    if not table.passed:
        raise typer.Exit(code=EXIT_GRADCHECK_FAILED)


@app.command()
def maskdump(
    ctx: typer.Context,
    graph_file: Annotated[Path, typer.Argument(help="Line-delimited graph file.")],
    index: Annotated[int, typer.Argument(help="0-based line index of the graph.")],
    fl: Annotated[int, typer.Option("--fl", help="Focal length.")] = 1,
    png: Annotated[Optional[Path], typer.Option("--png", help="Also render the mask as an image.")] = None,
):
    """Print the dense 0/1 focal mask of one graph and its ego-net sizes."""

    with _exit_codes():
        graphs = asyncio.run(read_graphs(graph_file))
        if not 0 <= index < len(graphs):
            _fail(EXIT_USAGE, f"index {index} out of range; {graph_file} holds {len(graphs)} graphs")
        if fl < 0:
            _fail(EXIT_USAGE, f"fl must be >= 0; received {fl}")

        mask = focal_mask(hop_matrix(graphs[index]), fl)
        for row in mask.dense:
            typer.echo(" ".join("1" if entry else "0" for entry in row))
        typer.echo("")
        for node, ego in enumerate(mask.rows):
            typer.echo(f"node {node}: ego-net size {len(ego)}: {' '.join(str(j) for j in ego)}")
        if png is not None:
            typer.echo(f"wrote {save_mask_png(mask.dense, png)}")


def main():
    logging.basicConfig(level=settings.log_level, format=settings.log_format)
    app()


if __name__ == "__main__":
    main()
