"""
main.py - influence-ad command line

    python main.py prepare  --config recipes/thyroid.recipe --out runs/thyroid
    python main.py train    --config configs/thyroid_vae.conf
    python main.py evaluate --config configs/thyroid_vae.conf
    python main.py bench    --config configs/thyroid_vae.conf --config configs/thyroid_dsvdd.conf

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric divergence.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from dotenv import dotenv_values
from pydantic import ValidationError

from data import DatasetRecipe, DatasetSplit, prepare_split
from errors import ConfigError, DataError, DomainError, NumericError, ShapeError
from evaluation import (
    ScoreReport,
    aggregate_runs,
    evaluate_scores,
    paired_comparison,
    random_ranking_f1,
    write_json,
    write_scores_csv,
)
from influence import self_influence_scores, tracin_ad
from models import AnomalyModel, DsvddModel, build_model, dsvdd_center_init
from numeric import Rng
from settings import RunConfig, configure_logging, configured_threads, load_environment, version_string
from storage import load_split, load_store, save_split, save_store
from training import CheckpointStore, train

logger = logging.getLogger("influence_ad")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

SPLIT_FILE = "split.bin"
STORE_FILE = "checkpoints.bin"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ========================================
# ARTIFACT HELPERS
# ========================================

def _provenance(payload: Dict, config: Dict) -> Dict:
    return {"version": version_string(), "config": config, **payload}


def _is_run_config(path: Path) -> bool:
    if not path.is_file():
        raise DataError("config file not found", path=str(path))
    return "dataset" in {k.lower() for k in dotenv_values(path)}


def _out_dir(args, cfg: Optional[RunConfig]) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None:
        return Path(cfg.output_dir)
    return Path("runs") / Path(args.config[0]).stem


def _load_run_config(path, args) -> RunConfig:
    return RunConfig.from_file(path, seed=args.seed)


def _write_sidecar(csv_path: Path, config: Dict, **extra):
    """`<name>.json` next to a CSV artifact with the version and resolved config"""
    write_json(_provenance({"file": csv_path.name, **extra}, config), csv_path.with_suffix(".json"))


def _write_loss_trace(store: CheckpointStore, path: Path, config: Dict):
    frame = pd.DataFrame({"epoch": np.arange(1, len(store.loss_history) + 1), "mean_loss": store.loss_history})
    frame.to_csv(path, index=False, float_format="%.17g")
    _write_sidecar(path, config, epochs=len(store.loss_history))


def _build_model(cfg: RunConfig, split: DatasetSplit, run_index: int) -> AnomalyModel:
    """Initial model of one run; the Deep SVDD center comes from the run's train rows"""
    spec = cfg.model
    rng = Rng(cfg.run_seed(run_index)).derive("init")
    model = build_model(spec.kind, split.dim, spec.hidden_widths, spec.latent_dim, rng,
                        mc_samples=spec.mc_samples, activation=spec.activation)
    if isinstance(model, DsvddModel):
        model = model.with_center(dsvdd_center_init(model, split.train))
    return model


def _split_for(cfg: RunConfig, run_index: int) -> DatasetSplit:
    recipe = DatasetRecipe.from_file(cfg.dataset)
    return prepare_split(recipe, cfg.run_seed(run_index))


# ========================================
# SCORING
# ========================================

def score_split(scorer: str, cfg: RunConfig, run_index: int, model: AnomalyModel, store: CheckpointStore,
                split: DatasetSplit) -> np.ndarray:
    """Anomaly scores (higher = more anomalous) of every validation row"""
    if scorer == "tracinad":
        return tracin_ad(store, model, split.train, split.val, cfg.influence_config(run_index)).anomaly_scores
    if scorer == "self-influence":
        return self_influence_scores(store, model, split.val, seed=cfg.run_seed(run_index),
                                     mc_samples=cfg.mc_samples)
    if scorer in ("reconstruction", "dsvdd-plain"):
        return model.with_params(store.final_params()).baseline_scores(split.val)
    raise ConfigError(f"unknown scorer {scorer!r}")


def _score_run(cfg: RunConfig, run_index: int, model: AnomalyModel, store: CheckpointStore,
               split: DatasetSplit, run_dir: Path) -> List[ScoreReport]:
    reports = []
    for scorer in cfg.scorers:
        scores = score_split(scorer, cfg, run_index, model, store, split)
        report = evaluate_scores(scorer, scores, split.val_labels, seed=cfg.run_seed(run_index))
        write_scores_csv(report, run_dir / f"scores_{scorer}.csv")
        _write_sidecar(run_dir / f"scores_{scorer}.csv", cfg.resolved(), run=run_index, scorer=scorer)
        logger.info(f"📊 [run {run_index}] {scorer}: F1={report.f1:.4f} "
                    f"(precision {report.precision:.4f}, recall {report.recall:.4f})")
        reports.append(report)
    return reports


def _execute_run(cfg: RunConfig, run_index: int, out: Path) -> Dict:
    """
    One run of the protocol with seed = base seed + run index.

    A single run reuses split.bin / checkpoints.bin from `prepare` and `train`
    when they exist in the output directory; multi-run evaluation rebuilds
    everything per run.
    """
    run_dir = out / f"run_{run_index}"
    reuse = cfg.runs == 1 and (out / SPLIT_FILE).is_file() and (out / STORE_FILE).is_file()
    if reuse:
        logger.info(f"♻️ Reusing {out / SPLIT_FILE} and {out / STORE_FILE}")
        split = load_split(out / SPLIT_FILE)
        model = _build_model(cfg, split, run_index)
        store = load_store(out / STORE_FILE, model)
    else:
        split = _split_for(cfg, run_index)
        model = _build_model(cfg, split, run_index)
        store = train(model, split.train, cfg.train_config(run_index))
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_loss_trace(store, run_dir / "loss_trace.csv", cfg.resolved())

    reports = _score_run(cfg, run_index, model, store, split, run_dir)
    return {
        "run": run_index,
        "seed": cfg.run_seed(run_index),
        "split": split.summary(),
        "rho": split.rho,
        "checkpoints": len(store),
        "scores": [r.summary() for r in reports],
    }


def evaluate_config(cfg: RunConfig, out: Path) -> Dict:
    """Every run of a config, then per-scorer aggregates; writes summary.json"""
    out.mkdir(parents=True, exist_ok=True)
    logger.info("=" * 60)
    logger.info(f"🚀 {cfg.model_kind} on {Path(cfg.dataset).stem}: {cfg.runs} run(s), scorers {', '.join(cfg.scorers)}")
    logger.info("=" * 60)

    runs = [_execute_run(cfg, r, out) for r in range(cfg.runs)]
    aggregates = {}
    for scorer in cfg.scorers:
        f1s = [next(s["f1"] for s in run["scores"] if s["scorer"] == scorer) for run in runs]
        aggregates[scorer] = aggregate_runs(f1s).summary()
        logger.info(f"✅ {scorer}: mean F1 {aggregates[scorer]['mean']:.4f} ± {aggregates[scorer]['std']:.4f}")

    rho = float(np.mean([run["rho"] for run in runs]))
    summary = _provenance({
        "runs": runs,
        "aggregate": aggregates,
        "random_ranking_f1": random_ranking_f1(rho),
    }, cfg.resolved())
    write_json(summary, out / "summary.json")
    return summary


# ========================================
# COMMANDS
# ========================================

def cmd_prepare(args) -> int:
    path = Path(args.config[0])
    cfg = _load_run_config(path, args) if _is_run_config(path) else None
    recipe = DatasetRecipe.from_file(cfg.dataset if cfg else path)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    out = _out_dir(args, cfg)

    split = prepare_split(recipe, seed)
    save_split(split, out / SPLIT_FILE)
    write_json(_provenance({
        "summary": split.summary(),
        "train_rows": int(split.train.shape[0]),
        "val_rows": int(split.val.shape[0]),
        "anomalies": int(split.val_labels.sum()),
        "dim": split.dim,
        "rho": split.rho,
        "seed": seed,
    }, recipe.model_dump(mode="json")), out / "split_summary.json")
    print(split.summary())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config[0], args)
    out = _out_dir(args, cfg)
    split_path = out / SPLIT_FILE
    if not split_path.is_file():
        raise DataError("prepared split not found (run `prepare` first)", path=str(split_path))

    split = load_split(split_path)
    model = _build_model(cfg, split, 0)
    store = train(model, split.train, cfg.train_config(0))
    save_store(store, out / STORE_FILE)
    _write_loss_trace(store, out / "loss_trace.csv", cfg.resolved())
    write_json(_provenance({
        "checkpoints": [{"epoch": cp.epoch, "learning_rate": cp.learning_rate} for cp in store],
        "final_mean_loss": store.loss_history[-1],
    }, cfg.resolved()), out / "train_summary.json")
    print(f"{len(store)} checkpoints written to {out / STORE_FILE}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args.config[0], args)
    summary = evaluate_config(cfg, _out_dir(args, cfg))
    for scorer, agg in summary["aggregate"].items():
        print(f"{scorer}: F1 {agg['mean']:.4f} ± {agg['std']:.4f} over {len(agg['f1s'])} run(s)")
    return EXIT_OK


def cmd_bench(args) -> int:
    out = Path(args.out) if args.out else Path("runs") / "bench"
    rows = []
    details = []
    for path in args.config:
        cfg = _load_run_config(path, args)
        name = Path(path).stem
        summary = evaluate_config(cfg, out / name)
        for scorer, agg in summary["aggregate"].items():
            rows.append({"config": name, "scorer": scorer, "runs": len(agg["f1s"]),
                         "mean_f1": agg["mean"], "std_f1": agg["std"]})

        entry = {"config": name, "resolved": cfg.resolved(), "aggregate": summary["aggregate"],
                 "random_ranking_f1": summary["random_ranking_f1"]}
        if len(cfg.scorers) == 2 and cfg.runs >= 2:
            a, b = cfg.scorers
            comparison = paired_comparison(summary["aggregate"][a]["f1s"], summary["aggregate"][b]["f1s"])
            entry["paired"] = {"a": a, "b": b, **comparison.summary()}
            logger.info(f"📈 [{name}] {a} vs {b}: mean difference {comparison.mean_difference:.4f}, "
                        f"p={comparison.p_value:.4g}")
        details.append(entry)

    table = pd.DataFrame(rows, columns=["config", "scorer", "runs", "mean_f1", "std_f1"])
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "bench.csv", index=False, float_format="%.6f")
    write_json({"version": version_string(), "configs": details}, out / "bench.json")
    print(table.to_string(index=False))
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: the config's output_dir)")
    common.add_argument("--seed", type=int, help="base seed, overrides the config")
    common.add_argument("--threads", type=int, help="torch intra-op threads, overrides INFLUENCE_AD_THREADS")

    parser = _Parser(prog="influence-ad", description="Influence-based anomaly detection (TracInAD)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("prepare", "train", "evaluate"):
        cmd = sub.add_parser(name, parents=[common])
        cmd.add_argument("--config", required=True, action="append",
                         help="run config" + (" or dataset recipe" if name == "prepare" else ""))
    bench = sub.add_parser("bench", parents=[common])
    bench.add_argument("--config", required=True, action="append", help="run config (repeatable)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_environment()
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        if args.command != "bench" and len(args.config) > 1:
            raise ConfigError(f"{args.command} takes a single --config")
        if args.seed is not None and args.seed < 0:
            raise ConfigError(f"--seed must be >= 0, got {args.seed}")
        threads = args.threads if args.threads is not None else configured_threads()
        if threads is not None:
            if threads < 1:
                raise ConfigError(f"--threads must be >= 1, got {threads}")
            torch.set_num_threads(threads)
        return COMMANDS[args.command](args)
    except (ConfigError, DomainError, ValidationError) as e:
        logger.error(f"❌ Configuration error: {e}")
        return EXIT_CONFIG
    except (DataError, ShapeError, OSError) as e:
        logger.error(f"❌ Data error: {e}")
        return EXIT_DATA
    except NumericError as e:
        logger.error(f"❌ Numeric error: {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
