"""
FedBatchBO Reporting Module

This module writes everything the harness emits: fixed-column CSVs, the
aggregate report over (strategy, distribution, iteration), YAML manifests and
SVG plots. Output is byte-stable so reruns can be diffed.
"""

import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import yaml  # noqa: E402

from .dynamics import STATE_NAMES, Trajectory  # noqa: E402

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
AGGREGATE_COLUMNS = [
    "strategy", "distribution", "iteration", "n", "mean_norm", "std_norm",
    "mean_raw", "std_raw", "mean_cum_time_hr",
]
MSE_COLUMNS = ["distribution", "offset", "task_id", "trajectory_id", "mse", "mse_normalised"]
_SVG_STYLE = {"svg.hashsalt": "fedbatch-bo", "svg.fonttype": "path"}


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Write with a header, no index and round-trip float formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def sha256(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def trajectory_frame(trajectory: Trajectory) -> pd.DataFrame:
    frame = pd.DataFrame(trajectory.states, columns=list(STATE_NAMES))
    frame.insert(0, "t", trajectory.times)
    return frame


def campaign_csv_name(strategy: str, distribution: str, task_index: int, seed: int) -> str:
    return f"campaigns/{distribution}/{strategy}/task{task_index:02d}_seed{seed}.csv"


def aggregate(frames: Iterable[Tuple[str, str, pd.DataFrame]]) -> pd.DataFrame:
    """Mean/std of normalised and raw best-so-far per (strategy, distribution, iteration).

    Args:
        frames: (strategy, distribution, campaign frame) triples

    Returns:
        one row per group with the sample count ``n``
    """
    tagged = []
    for strategy, distribution, frame in frames:
        frame = frame[["iteration", "g_best_norm", "g_best_raw", "cum_time_hr"]].copy()
        frame.insert(0, "distribution", distribution)
        frame.insert(0, "strategy", strategy)
        tagged.append(frame)
    if not tagged:
        return pd.DataFrame(columns=AGGREGATE_COLUMNS)
    data = pd.concat(tagged, ignore_index=True)
    grouped = data.groupby(["strategy", "distribution", "iteration"], sort=True)
    report = grouped.agg(
        n=("g_best_norm", "size"),
        mean_norm=("g_best_norm", "mean"),
        std_norm=("g_best_norm", lambda s: float(np.std(s.to_numpy(dtype=float)))),
        mean_raw=("g_best_raw", "mean"),
        std_raw=("g_best_raw", lambda s: float(np.std(s.to_numpy(dtype=float)))),
        mean_cum_time_hr=("cum_time_hr", "mean"),
    ).reset_index()
    return report[AGGREGATE_COLUMNS]


def aggregate_from_csvs(entries: Sequence[Dict[str, Any]], root: Union[str, Path]) -> pd.DataFrame:
    """Recompute the aggregate from campaign CSVs listed in a manifest."""
    root = Path(root)
    return aggregate(
        (entry["strategy"], entry["distribution"], pd.read_csv(root / entry["csv"])) for entry in entries
    )


def write_manifest(data: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, sort_keys=True)
    return path


def read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f)


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Wrote plot {path}")
    return path


def plot_trajectory(frame: pd.DataFrame, path: Union[str, Path], title: str = "") -> Path:
    """One panel per state against time."""
    with plt.rc_context(_SVG_STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(8, 6), sharex=True)
        for ax, name in zip(axes.ravel(), STATE_NAMES):
            ax.plot(frame["t"], frame[name])
            ax.set_ylabel(name)
            ax.grid(alpha=0.3)
        for ax in axes[1]:
            ax.set_xlabel("t [hr]")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_convergence(report: pd.DataFrame, path: Union[str, Path], x: str = "iteration") -> Path:
    """Normalised best-so-far (mean +- std) against trajectory count or cumulative time."""
    xlabel = {"iteration": "trajectories", "mean_cum_time_hr": "cumulative experiment time [hr]"}[x]
    with plt.rc_context(_SVG_STYLE):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for (strategy, distribution), group in report.groupby(["strategy", "distribution"], sort=True):
            xs = group[x].to_numpy(dtype=float) + (1.0 if x == "iteration" else 0.0)
            mean = group["mean_norm"].to_numpy(dtype=float)
            std = group["std_norm"].to_numpy(dtype=float)
            ax.plot(xs, mean, label=f"{strategy} / {distribution}")
            ax.fill_between(xs, mean - std, mean + std, alpha=0.2)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("normalised profit (best so far)")
        ax.grid(alpha=0.3)
        ax.legend(fontsize="small")
        fig.tight_layout()
        return _save(fig, path)


def plot_mse(frame: pd.DataFrame, path: Union[str, Path], order: List[str]) -> Path:
    """Box plot of trajectory-wise MSE per distribution, in the given order."""
    present = [name for name in order if name in set(frame["distribution"])]
    data = [frame.loc[frame["distribution"] == name, "mse"].to_numpy(dtype=float) for name in present]
    with plt.rc_context(_SVG_STYLE):
        fig, ax = plt.subplots(figsize=(9, 4.5))
        if data:
            ax.boxplot(data)
            ax.set_xticks(range(1, len(present) + 1))
            ax.set_xticklabels(present, rotation=30, ha="right")
        ax.set_yscale("log")
        ax.set_ylabel("trajectory MSE")
        fig.tight_layout()
        return _save(fig, path)


def task_convergence_name(distribution: str, task_index: int) -> str:
    return f"convergence_tasks/{distribution}/task{task_index:02d}.svg"


def plot_prediction_examples(examples: Sequence[Dict[str, Any]], path: Union[str, Path]) -> Path:
    """One row per example, one column per state.

    Each example carries ``title``, ``times``, ``truth``, ``mean`` and ``std``
    (arrays of shape (T, 4)) plus the ``context_times`` / ``context_states``
    observed for the predicted trajectory. The band is mean +- 2 std.
    """
    with plt.rc_context(_SVG_STYLE):
        fig, axes = plt.subplots(len(examples), len(STATE_NAMES), figsize=(12, 3 * len(examples)),
                                 sharex=True, squeeze=False)
        for row, example in zip(axes, examples):
            times = np.asarray(example["times"], dtype=float)
            truth, mean, std = (np.asarray(example[k], dtype=float) for k in ("truth", "mean", "std"))
            ctx_t = np.asarray(example["context_times"], dtype=float)
            ctx_x = np.asarray(example["context_states"], dtype=float).reshape(len(ctx_t), -1)
            for i, (ax, name) in enumerate(zip(row, STATE_NAMES)):
                ax.plot(times, truth[:, i], color="black", lw=1.0, label="truth")
                ax.plot(times, mean[:, i], color="tab:blue", label="mean")
                ax.fill_between(times, mean[:, i] - 2 * std[:, i], mean[:, i] + 2 * std[:, i],
                                color="tab:blue", alpha=0.2)
                ax.scatter(ctx_t, ctx_x[:, i], color="tab:red", s=12, zorder=3, label="context")
                ax.set_title(f"{example['title']}: {name}", fontsize="small")
                ax.grid(alpha=0.3)
        for ax in axes[-1]:
            ax.set_xlabel("t [hr]")
        axes[0][0].legend(fontsize="x-small")
        fig.tight_layout()
        return _save(fig, path)
