"""Domination, conflict and finish-step criteria, plus run aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

SUMMARY_METRICS = ("success", "domination_rate", "conflict_rate", "finish_steps", "overlap")


@dataclass
class EpisodeMetrics:
    manipulating_steps: tuple
    domination_rate: float
    conflict_rate: float
    finish_steps: int
    success: bool
    overlap: float = float("nan")
    no_manipulation: bool = False
    alpha_trace: np.ndarray | None = field(default=None, repr=False)

    def row(self):
        return {
            "success": float(self.success),
            "domination_rate": self.domination_rate,
            "conflict_rate": self.conflict_rate,
            "finish_steps": float(self.finish_steps),
            "overlap": self.overlap,
        }


def domination_rate(flags):
    """Largest agent share of manipulating steps, in percent.

    ``flags`` is a sequence of per-agent boolean sequences of equal length.
    An episode where nobody manipulates anything reports the neutral 50.
    """
    counts = [int(np.count_nonzero(f)) for f in flags]
    lengths = {len(f) for f in flags}
    if len(lengths) > 1:
        raise ValueError(f"interaction flag sequences differ in length: {sorted(lengths)}")
    return domination_from_counts(counts)


def domination_from_counts(counts):
    total = sum(counts)
    if total == 0:
        return 50.0
    return 100.0 * max(counts) / total


def conflict_rate(gripper_distances, threshold):
    """Percent of steps whose gripper distance is strictly below ``threshold``."""
    d = np.asarray(gripper_distances, dtype=np.float64)
    if d.size == 0:
        return 0.0
    return 100.0 * float(np.count_nonzero(d < threshold)) / d.size


def finish_steps(success_step, horizon):
    """Steps to success, or ``horizon`` when the episode failed."""
    if success_step is None:
        return horizon
    if success_step > horizon:
        raise ValueError(f"success step {success_step} exceeds horizon {horizon}")
    return int(success_step)


def episode_metrics(flags, gripper_distances, success_step, horizon, threshold, alphas=None):
    counts = tuple(int(np.count_nonzero(f)) for f in flags)
    overlap = float("nan")
    trace = None
    if alphas is not None and len(alphas) and len(alphas[0]) == 2:
        trace = np.asarray(alphas, dtype=np.float64)
        overlap = float(np.mean(np.sum(trace[:, 0] * trace[:, 1], axis=-1)))
    return EpisodeMetrics(
        manipulating_steps=counts,
        domination_rate=domination_rate(flags),
        conflict_rate=conflict_rate(gripper_distances, threshold),
        finish_steps=finish_steps(success_step, horizon),
        success=success_step is not None,
        overlap=overlap,
        no_manipulation=sum(counts) == 0,
        alpha_trace=trace,
    )


def mean_std(values):
    """Mean and population standard deviation, ignoring NaNs."""
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    if v.size == 0:
        return float("nan"), float("nan")
    if np.all(v == v[0]):
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std())


def aggregate(runs):
    """Summarise episodes per method as ``{method: {metric: (mean, std)}}``.

    ``runs`` maps a method name to a list of per-seed lists of
    :class:`EpisodeMetrics` (or plain metric dicts). Each seed is reduced to
    its mean first; mean and population std are then taken across seeds, with
    success reported in percent.
    """
    if not runs:
        raise ValueError("aggregate needs at least one method")
    out = {}
    for method, seeds in runs.items():
        if not seeds or not any(len(s) for s in seeds):
            raise ValueError(f"method {method!r} has no episodes")
        per_seed = {m: [] for m in SUMMARY_METRICS}
        for episodes in seeds:
            if not episodes:
                continue
            rows = [e.row() if isinstance(e, EpisodeMetrics) else e for e in episodes]
            for m in SUMMARY_METRICS:
                vals = np.asarray([float(r.get(m, math.nan)) for r in rows])
                vals = vals[~np.isnan(vals)]
                mean = float(vals.mean()) if vals.size else math.nan
                per_seed[m].append(100.0 * mean if m == "success" else mean)
        out[method] = {m: mean_std(v) for m, v in per_seed.items()}
    return out


def write_summary_csv(summary, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method"] + [f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "std")])
        for method, stats in summary.items():
            w.writerow([method] + [repr(float(x)) for m in SUMMARY_METRICS for x in stats[m]])


def write_plot_data(summary, path):
    """Long-format ``metric,method,mean,std`` rows for external plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "method", "mean", "std"])
        for m in SUMMARY_METRICS:
            for method, stats in summary.items():
                mean, std = stats[m]
                w.writerow([m, method, repr(float(mean)), repr(float(std))])


def format_table(summary):
    lines = [f"{'metric':<16}" + "".join(f"{m:>22}" for m in summary)]
    for m in SUMMARY_METRICS:
        cells = "".join(f"{summary[k][m][0]:>13.2f} ± {summary[k][m][1]:<6.2f}" for k in summary)
        lines.append(f"{m:<16}{cells}")
    return "\n".join(lines)
