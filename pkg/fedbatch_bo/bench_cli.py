"""
FedBatchBO Bench CLI Module

Command-line entry point of the harness. Subcommands:

    simulate    one batch run of the penicillin model -> trajectory CSV + SVG
    train       meta-train SANODEP -> checkpoint + training-log CSV
    mse-sweep   forecast error of a checkpoint across task distributions
    benchmark   the (strategy x distribution x task x seed) campaign matrix

Exit codes: 0 success, 2 partial failure, 3 configuration error, 4 training abort.
"""

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from colorama import Fore, Style
from colorama import init as colorama_init
from dotenv import load_dotenv

from .campaign import CampaignResult, Strategy, TaskMaxCache, run_strategy, task_max_oracle
from .config import OUTPUT_ENV_VAR, HarnessConfig
from .dynamics import NOMINAL_RECIPE, NOMINAL_TASK, RECIPE_FIELDS, TASK_FIELDS, simulate, simulate_batch
from .errors import (
    ConfigError,
    DivergedTrajectory,
    FedBatchError,
    InvalidParameters,
    NonFiniteLatent,
    TrainingAborted,
)
from .reporting import (
    MSE_COLUMNS,
    aggregate,
    campaign_csv_name,
    plot_convergence,
    plot_mse,
    plot_prediction_examples,
    plot_trajectory,
    sha256,
    task_convergence_name,
    trajectory_frame,
    write_csv,
    write_manifest,
)
from .sanodep import CHECKPOINT_NAME, SanodepModel, Trainer
from .tasking import ExponentialDecayFamily, PenicillinSystems, TrajectoryPoints, sample_recipe, sample_task

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 2
EXIT_CONFIG = 3
EXIT_TRAINING = 4


def _report(code: int, message: str) -> None:
    colour = {EXIT_OK: Fore.GREEN, EXIT_PARTIAL: Fore.YELLOW}.get(code, Fore.RED)
    print(f"{colour}{message}{Style.RESET_ALL}")


def _parse_overrides(pairs: Optional[Sequence[str]], allowed: Sequence[str], what: str) -> Dict[str, float]:
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or key not in allowed:
            raise ConfigError(f"Invalid {what} override '{pair}'; expected KEY=VALUE with KEY in {list(allowed)}")
        try:
            overrides[key] = float(value)
        except ValueError as e:
            raise ConfigError(f"Invalid {what} value in '{pair}'") from e
    return overrides


# simulate

def cmd_simulate(config: HarnessConfig, out: Path, recipe_overrides: Optional[Sequence[str]] = None,
                 task_overrides: Optional[Sequence[str]] = None) -> int:
    try:
        recipe = replace(NOMINAL_RECIPE, **_parse_overrides(recipe_overrides, RECIPE_FIELDS, "recipe"))
        task = replace(NOMINAL_TASK, **_parse_overrides(task_overrides, TASK_FIELDS, "task"))
        recipe.check_horizon(config.solver.t_max)
    except InvalidParameters as e:
        raise ConfigError(str(e)) from e
    grid = np.linspace(0.0, recipe.t_stop, config.solver.n_grid)
    csv_path = out / "simulate" / "trajectory.csv"
    try:
        trajectory = simulate(recipe, task, config.fixed, grid, config.solver)
    except DivergedTrajectory as e:
        logger.error(f"Simulation diverged: {e}")
        if e.partial is not None:
            write_csv(trajectory_frame(e.partial), csv_path)
            logger.info(f"Wrote partial trajectory ({len(e.partial)} rows) to {csv_path}")
        return EXIT_PARTIAL
    frame = trajectory_frame(trajectory)
    write_csv(frame, csv_path)
    plot_trajectory(frame, out / "simulate" / "trajectory.svg", title=f"task {task.fingerprint()}")
    logger.info(f"Wrote {len(frame)} rows to {csv_path}")
    return EXIT_OK


# train

def _training_source(config: HarnessConfig):
    if config.training.family == "exponential-decay":
        return ExponentialDecayFamily()
    dist = config.distributions[config.training.distribution]
    return PenicillinSystems(dist=dist, fixed=config.fixed, solver=config.solver)


def cmd_train(config: HarnessConfig, out: Path, seed: Optional[int] = None, resume: bool = False) -> int:
    cfg = config.sanodep_config()
    seed = config.training.seed if seed is None else seed
    train_dir = out / "train"
    source = _training_source(config)
    checkpoint = train_dir / CHECKPOINT_NAME
    if resume:
        if not checkpoint.exists():
            raise ConfigError(f"Nothing to resume: {checkpoint} does not exist")
        trainer = Trainer.resume(checkpoint, source)
    else:
        trainer = Trainer(cfg, source, seed)
    config.dump(train_dir / "config.yaml")
    try:
        trainer.run(steps=cfg.steps, out_dir=train_dir)
    except TrainingAborted:
        trainer.save(train_dir)
        raise
    logger.info(f"Training finished at step {trainer.step}; checkpoint in {checkpoint}")
    return EXIT_OK


# mse-sweep

def _load_checkpoint(path: Optional[str]) -> SanodepModel:
    if not path or not Path(path).exists():
        raise ConfigError(f"Checkpoint not found: {path}")
    return _cached_model(str(Path(path).resolve()))


@lru_cache(maxsize=2)
def _cached_model(path: str) -> SanodepModel:
    return SanodepModel.from_checkpoint(path)


def cmd_mse_sweep(config: HarnessConfig, out: Path, checkpoint: Optional[str], seed: Optional[int] = None) -> int:
    """Trajectory-wise forecast MSE per testing distribution.

    Each test trajectory is forecast from its own (t0, x0, x0) triple plus
    ``context_trajectories`` other trajectories of the same task observed at
    ``context_points`` grid times.
    """
    model = _load_checkpoint(checkpoint)
    sweep = config.mse_sweep
    task_seed = sweep.task_seed if seed is None else seed
    grid = np.linspace(0.0, config.solver.t_max, config.solver.n_grid)
    scale = np.asarray(model.scaler.scale)
    generator = torch.Generator().manual_seed(task_seed)
    rows: List[Dict[str, Any]] = []
    examples: List[Dict[str, Any]] = []
    excluded = 0
    n_traj = sweep.trajectories_per_task + sweep.context_trajectories

    for d_index, name in enumerate(sweep.distributions):
        dist = config.distributions[name]
        for task_id in range(sweep.n_tasks):
            rng = np.random.default_rng([task_seed, d_index, task_id])
            task = sample_task(dist, rng)
            recipes = [sample_recipe(rng, config.solver.t_max) for _ in range(n_traj)]
            x0s = np.stack([r.x0() for r in recipes])
            feeds = np.array([r.F for r in recipes])
            states, diverged = simulate_batch(x0s, feeds, [task] * n_traj, config.fixed, grid, config.solver)

            context = []
            for j in range(sweep.context_trajectories):
                if diverged[j]:
                    excluded += 1
                    continue
                idx = np.sort(rng.choice(np.arange(1, len(grid)), size=sweep.context_points, replace=False))
                context.append(TrajectoryPoints(x0=x0s[j], times=grid[idx], states=states[j, idx], trajectory=j))

            test = [j for j in range(sweep.context_trajectories, n_traj) if not diverged[j]]
            excluded += int(diverged[sweep.context_trajectories:].sum())
            if not test:
                continue
            try:
                pred = model.predict_many(context, x0s[test], grid, sweep.n_samples, generator)
            except NonFiniteLatent as e:
                logger.warning(f"MSE sweep: {name} task {task_id} excluded, {len(test)} trajectories: {e}")
                excluded += len(test)
                continue
            if not examples:
                examples = _prediction_examples(model, context, x0s[test[0]], states[test[0]], grid,
                                                pred.mean[0], pred.std[0], sweep, rng, generator, name)
            for k, j in enumerate(test):
                err = pred.mean[k] - states[j]
                rows.append({
                    "distribution": name,
                    "offset": dist.offset,
                    "task_id": task_id,
                    "trajectory_id": j - sweep.context_trajectories,
                    "mse": float(np.mean(err ** 2)),
                    "mse_normalised": float(np.mean((err / scale) ** 2)),
                })
        logger.info(f"MSE sweep: finished {name}")

    if excluded:
        logger.warning(f"Excluded {excluded} diverged or non-finite test trajectories from the MSE sweep")
    frame = pd.DataFrame(rows, columns=MSE_COLUMNS)
    write_csv(frame, out / "mse_sweep" / "mse.csv")
    plot_mse(frame, out / "mse_sweep" / "mse.svg", list(sweep.distributions))
    if examples:
        plot_prediction_examples(examples, out / "mse_sweep" / "examples.svg")
    return EXIT_OK


def _prediction_examples(model: SanodepModel, context: List[TrajectoryPoints], x0: np.ndarray, truth: np.ndarray,
                         grid: np.ndarray, forecast_mean: np.ndarray, forecast_std: np.ndarray, sweep,
                         rng: np.random.Generator, generator: torch.Generator, name: str) -> List[Dict[str, Any]]:
    """Forecast and interpolation panels for one test trajectory."""
    n_points = min(sweep.context_points, len(grid) - 1)
    idx = np.sort(rng.choice(np.arange(1, len(grid)), size=n_points, replace=False))
    observed = TrajectoryPoints(x0=x0, times=grid[idx], states=truth[idx], trajectory=len(context))
    try:
        interp = model.predict(context + [observed], x0, grid, sweep.n_samples, generator)
    except NonFiniteLatent as e:
        logger.warning(f"MSE sweep: no interpolation example for {name}: {e}")
        return []
    return [
        {"title": f"{name} forecast", "times": grid, "truth": truth, "mean": forecast_mean,
         "std": forecast_std, "context_times": [0.0], "context_states": x0[None, :]},
        {"title": f"{name} interpolation", "times": grid, "truth": truth, "mean": interp.mean[0],
         "std": interp.std[0], "context_times": np.concatenate([[0.0], observed.times]),
         "context_states": np.vstack([x0[None, :], observed.states])},
    ]


# benchmark

def _run_job(job: Dict[str, Any]) -> Dict[str, Any]:
    """Worker body: one campaign, errors returned rather than raised."""
    try:
        model = _load_checkpoint(job["checkpoint"]) if job["strategy"] is Strategy.SANODEP else None
        result = run_strategy(job["strategy"], job["task"], job["settings"], job["seed"], job["task_index"],
                              model, job["fixed"], job["solver"], job["profit"])
        return {**job, "result": result, "error": None}
    except Exception as e:
        logger.error(f"Campaign {job['strategy'].value}/{job['distribution']}/task{job['local_index']}"
                     f"/seed{job['seed']} failed: {e}")
        return {**job, "result": None, "error": str(e)}


def _map(fn, items: List[Any], jobs: int) -> List[Any]:
    if jobs <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _oracle_job(item: Dict[str, Any]) -> Optional[float]:
    try:
        return task_max_oracle(item["task"], item["settings"], item["fixed"], item["solver"], item["profit"])
    except FedBatchError as e:
        logger.error(f"Task maximum for {item['task'].fingerprint()} failed: {e}")
        return None


def cmd_benchmark(config: HarnessConfig, out: Path, checkpoint: Optional[str] = None, jobs: int = 1,
                  seed: Optional[int] = None) -> int:
    bench = config.benchmark
    settings = config.strategies
    strategies = [Strategy(name) for name in bench.strategies]
    seeds = list(config.seeds) if seed is None else [seed]
    if Strategy.SANODEP in strategies:
        _load_checkpoint(checkpoint)

    tasks = []
    for d_index, name in enumerate(bench.distributions):
        rng = np.random.default_rng([bench.task_seed, d_index])
        for local in range(bench.n_tasks):
            tasks.append({"distribution": name, "local_index": local, "task_index": d_index * bench.n_tasks + local,
                          "task": sample_task(config.distributions[name], rng)})

    common = {"settings": settings, "fixed": config.fixed, "solver": config.solver, "profit": config.profit}
    out.mkdir(parents=True, exist_ok=True)
    cache = TaskMaxCache(settings, str(out / "task_max.json"), config.fixed, config.solver, config.profit)
    missing = cache.missing([t["task"] for t in tasks])
    for task, value in zip(missing, _map(_oracle_job, [{**common, "task": task} for task in missing], jobs)):
        if value is not None:
            cache.put(task, value)

    job_list = [
        {**common, **t, "strategy": strategy, "seed": s, "checkpoint": checkpoint}
        for t in tasks for strategy in strategies for s in seeds
    ]
    logger.info(f"Running {len(job_list)} campaigns with {jobs} worker(s)")
    outcomes = _map(_run_job, job_list, jobs)

    frames, entries, failed = [], [], []
    per_task: Dict[Any, List[Any]] = {}
    for outcome in outcomes:
        strategy = outcome["strategy"].value
        if outcome["error"] is not None:
            failed.append({"strategy": strategy, "distribution": outcome["distribution"],
                           "task_index": outcome["local_index"], "seed": outcome["seed"], "error": outcome["error"]})
            continue
        task_max = cache.values.get(cache.key(outcome["task"]))
        if task_max is None:
            failed.append({"strategy": strategy, "distribution": outcome["distribution"],
                           "task_index": outcome["local_index"], "seed": outcome["seed"],
                           "error": "no task maximum"})
            continue
        result: CampaignResult = outcome["result"]
        result.normalise(task_max)
        frame = result.to_frame()
        rel = campaign_csv_name(strategy, outcome["distribution"], outcome["local_index"], outcome["seed"])
        write_csv(frame, out / rel)
        frames.append((strategy, outcome["distribution"], frame))
        per_task.setdefault((outcome["distribution"], outcome["local_index"]), []).append(
            (strategy, outcome["distribution"], frame))
        entries.append({"strategy": strategy, "distribution": outcome["distribution"],
                        "task_index": outcome["local_index"], "seed": outcome["seed"], "csv": rel,
                        "task_max": task_max, "sha256": sha256(out / rel)})

    report = aggregate(frames)
    aggregate_path = write_csv(report, out / "aggregate.csv")
    if len(report):
        plot_convergence(report, out / "convergence_trajectories.svg", x="iteration")
        plot_convergence(report, out / "convergence_time.svg", x="mean_cum_time_hr")
    task_plots = []
    for (dist_name, local), task_frames in sorted(per_task.items()):
        rel = task_convergence_name(dist_name, local)
        plot_convergence(aggregate(task_frames), out / rel, x="iteration")
        task_plots.append(rel)
    write_manifest({
        "schema_version": 1,
        "config": config.to_dict(),
        "seeds": seeds,
        "tasks": [{"distribution": t["distribution"], "task_index": t["local_index"],
                   "params": {k: float(v) for k, v in zip(TASK_FIELDS, t["task"].as_array())}} for t in tasks],
        "campaigns": entries,
        "failed": failed,
        "aggregate_csv": "aggregate.csv",
        "aggregate_sha256": sha256(aggregate_path),
        "task_convergence_plots": task_plots,
    }, out / "manifest.yaml")

    failure_rate = len(failed) / len(job_list) if job_list else 0.0
    if failure_rate > bench.failure_threshold:
        logger.error(f"{len(failed)} of {len(job_list)} campaigns failed")
        return EXIT_PARTIAL
    return EXIT_OK


# entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML harness config (defaults when omitted)")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--out", default=None, help=f"output directory (beats ${OUTPUT_ENV_VAR})")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for the benchmark matrix")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="warnings and errors only")

    parser = argparse.ArgumentParser(prog="fedbatch-bo", description="Few-shot BO of a fed-batch penicillin reactor")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="simulate one batch run")
    p.add_argument("--recipe", action="append", metavar="KEY=VALUE", help=f"recipe override, KEY in {RECIPE_FIELDS}")
    p.add_argument("--task", action="append", metavar="KEY=VALUE", help=f"task override, KEY in {TASK_FIELDS}")
    p = sub.add_parser("train", parents=[common], help="meta-train SANODEP")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in <out>/train")
    p = sub.add_parser("mse-sweep", parents=[common], help="forecast MSE across task distributions")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("benchmark", parents=[common], help="run the campaign matrix")
    p.add_argument("--checkpoint", default=None)
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    colorama_init()
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    try:
        config = HarnessConfig.load(args.config) if args.config else HarnessConfig()
        out = config.resolve_output_dir(args.out)
        if args.command == "simulate":
            code = cmd_simulate(config, out, args.recipe, args.task)
        elif args.command == "train":
            code = cmd_train(config, out, args.seed, args.resume)
        elif args.command == "mse-sweep":
            code = cmd_mse_sweep(config, out, args.checkpoint, args.seed)
        else:
            code = cmd_benchmark(config, out, args.checkpoint, args.jobs, args.seed)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        _report(EXIT_CONFIG, f"{args.command}: configuration error: {e}")
        return EXIT_CONFIG
    except TrainingAborted as e:
        logger.error(f"Training aborted: {e}")
        _report(EXIT_TRAINING, f"{args.command}: training aborted: {e}")
        return EXIT_TRAINING
    except FedBatchError as e:
        logger.error(f"{args.command} failed: {e}")
        _report(EXIT_PARTIAL, f"{args.command}: failed: {e}")
        return EXIT_PARTIAL
    _report(code, f"{args.command}: {'done' if code == EXIT_OK else 'finished with failures'} ({out})")
    return code


if __name__ == "__main__":
    sys.exit(main())
