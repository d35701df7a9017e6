import argparse
import asyncio
import logging
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from config import RunConfig, SbmSection, load_run_config, settings
from sbm import PRESET_PROBABILITIES, generate_dataset, preset
from storage import save_ablation, save_dataset, write_text
from trainer import ablate_fl


async def run_study(base: RunConfig, out_dir: Path, seeds: list[int], jobs: int) -> None:
    """Four SBM-PATTERN densities, each with the vanilla/fl=1..3 ablation."""

    summary = ["p,label,mean,std,n_seeds"]
    means: dict[float, dict[int | None, float]] = {}
    for p in PRESET_PROBABILITIES:
        section = SbmSection(
            **preset(p, seed=base.sbm.seed).model_dump(),
            n_train=base.sbm.n_train,
            n_val=base.sbm.n_val,
            n_test=base.sbm.n_test,
        )
        config = base.model_copy(update={"sbm": section})
        print(f"=== p = p_p = {p:.2f} ===")
        dataset = generate_dataset(section.generator_params(), section.n_train, section.n_val, section.n_test, jobs=jobs)
        print(dataset.stats.model_dump_json())
        await save_dataset(dataset, out_dir / f"p{p:.2f}" / "data", config)

        table = ablate_fl(dataset.splits(), config, config.train.ablate_fl, seeds, jobs=jobs)
        await save_ablation(table, out_dir / f"p{p:.2f}")
        print(table.to_csv(), end="")
        means[p] = {row.fl: row.mean for row in table.rows}
        summary += [f"{p:.2f},{row.label},{row.mean!r},{row.std!r},{row.n_seeds}" for row in table.rows]

    await write_text(out_dir / "summary.csv", "\n".join(summary) + "\n")

    dense = means[max(PRESET_PROBABILITIES)]
    if 1 in dense and None in dense and dense[1] <= dense[None]:
        logging.warning(f"fl=1 ({dense[1]:.4f}) did not beat vanilla ({dense[None]:.4f}) at the densest setting")
    sparse = means[min(PRESET_PROBABILITIES)]
    if 1 in sparse and 2 in sparse and sparse[2] < sparse[1]:
        logging.warning(f"fl=2 ({sparse[2]:.4f}) fell below fl=1 ({sparse[1]:.4f}) at the sparsest setting")


def main() -> None:
    parser = argparse.ArgumentParser(description="Focal-length study across the four SBM-PATTERN densities.")
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("--out", type=Path, default=Path(settings.out_dir) / "desk_study")
    parser.add_argument("--seeds", default=None, help="Comma list of training seeds.")
    parser.add_argument("--jobs", type=int, default=settings.jobs)
    args = parser.parse_args()

    logging.basicConfig(level=settings.log_level, format=settings.log_format)
    base = load_run_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else base.train.ablate_seeds
    asyncio.run(run_study(base, args.out, seeds, args.jobs))


if __name__ == "__main__":
    main()
