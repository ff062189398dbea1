"""Dice, backward/forward transfer, and result aggregation.

Scores are held as a per-(snapshot, task, sample) Dice tensor. Row 0
holds the untrained pipeline so forward transfer has a baseline for
the first stage; row i >= 1 is the pipeline after finishing stage i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def dice(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """Overlap 2|P&G| / (|P|+|G|); two empty masks count as 1.0."""
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(true_mask).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


class ScoreTensor:
    """dice[stage][task] -> per-sample Dice array; stage 0 is the
    untrained pipeline."""

    def __init__(self, values: list[list[np.ndarray]]):
        if not values or not values[0]:
            raise ValueError("empty score tensor")
        n_tasks = len(values[0])
        for row in values:
            if len(row) != n_tasks:
                raise ValueError("ragged task dimension")
            for arr in row:
                if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                    raise ValueError("Dice values outside [0, 1]")
        self.values = [[np.asarray(a, dtype=np.float64) for a in row]
                       for row in values]
        self.n_stages = len(values) - 1
        self.n_tasks = n_tasks

    def stage(self, i: int) -> list[np.ndarray]:
        """Scores of the pipeline after stage i (0 = untrained)."""
        return self.values[i]

    def final_scores(self) -> np.ndarray:
        return np.concatenate(self.values[-1])

    def per_task_final(self) -> np.ndarray:
        return np.array([row.mean() for row in self.values[-1]])


def bwt_per_task(scores: ScoreTensor) -> np.ndarray:
    """Mean later-stage Dice change on each task's test set; defined
    for every task but the last."""
    n = scores.n_stages
    if n < 2:
        raise ValueError("backward transfer needs at least 2 stages")
    out = np.empty(n - 1)
    for i in range(1, n):  # task index, 1-based
        base = scores.values[i][i - 1]
        diffs = [np.mean(scores.values[j][i - 1] - base) for j in range(i + 1, n + 1)]
        out[i - 1] = np.mean(diffs)
    return out


def compute_bwt(scores: ScoreTensor) -> float:
    """Average Dice change on earlier tasks caused by later training,
    normalized by the number of tasks for which it is defined."""
    return float(np.mean(bwt_per_task(scores)))


def fwt_per_task(scores: ScoreTensor) -> np.ndarray:
    """Mean per-stage Dice gain on each task up to its own stage,
    measured against the untrained pipeline; defined from task 2 on."""
    n = scores.n_stages
    if n < 2:
        raise ValueError("forward transfer needs at least 2 stages")
    if len(scores.values) != n + 1:
        raise ValueError("untrained-pipeline row missing")
    out = np.empty(n - 1)
    for i in range(2, n + 1):
        diffs = [np.mean(scores.values[j][i - 1] - scores.values[j - 1][i - 1])
                 for j in range(1, i + 1)]
        out[i - 2] = np.mean(diffs)
    return out


def compute_fwt(scores: ScoreTensor) -> float:
    return float(np.mean(fwt_per_task(scores)))


def build_score_tensor(snapshots, test_sets) -> ScoreTensor:
    """Evaluate every snapshot (index 0 = untrained) on every task's
    fixed test set through its full inference path."""
    values = []
    for snap in snapshots:
        row = []
        for task_samples in test_sets:
            images = np.stack([s.image for s in task_samples])
            pred, _ = snap.infer_batch(images)
            row.append(np.array([
                dice(pred[k], task_samples[k].mask)
                for k in range(len(task_samples))
            ]))
        values.append(row)
    return ScoreTensor(values)


@dataclass(frozen=True)
class MethodReport:
    method: str
    scenario: str
    seed: int
    mean_dice: float
    std_dice: float
    bwt: float
    bwt_std: float
    fwt: float
    fwt_std: float
    bwt_alt_norm: float      # normalized by the total task count instead
    fwt_alt_norm: float
    pool_size: int | None
    wall_seconds: float


def make_report(method: str, scenario: str, seed: int, scores: ScoreTensor,
                pool_size: int | None, wall_seconds: float) -> MethodReport:
    final = scores.final_scores()
    n = scores.n_tasks
    bpt = bwt_per_task(scores)
    fpt = fwt_per_task(scores)
    return MethodReport(
        method=method, scenario=scenario, seed=seed,
        mean_dice=float(final.mean()), std_dice=float(final.std()),
        bwt=float(bpt.mean()), bwt_std=float(bpt.std()),
        fwt=float(fpt.mean()), fwt_std=float(fpt.std()),
        bwt_alt_norm=float(bpt.mean() * (n - 1) / n),
        fwt_alt_norm=float(fpt.mean() * (n - 1) / n),
        pool_size=pool_size, wall_seconds=wall_seconds,
    )


CSV_HEADER = ("method,scenario,seed,mean_dice,std_dice,bwt,bwt_alt_norm,"
              "fwt,fwt_alt_norm,pool_size,wall_seconds")


def report_csv_line(r: MethodReport) -> str:
    pool = "" if r.pool_size is None else str(r.pool_size)
    return (f"{r.method},{r.scenario},{r.seed},"
            f"{r.mean_dice:.6f},{r.std_dice:.6f},"
            f"{r.bwt:.6f},{r.bwt_alt_norm:.6f},"
            f"{r.fwt:.6f},{r.fwt_alt_norm:.6f},"
            f"{pool},{r.wall_seconds:.3f}")


def format_table(reports: list[MethodReport]) -> str:
    """Seed-averaged plain-text table, one body row per method."""
    by_method: dict[str, list[MethodReport]] = {}
    order = []
    for r in reports:
        if r.method not in by_method:
            order.append(r.method)
        by_method.setdefault(r.method, []).append(r)

    header = (f"{'Method':<14}{'Dice':>14}{'BWT':>15}{'FWT':>15}"
              f"{'|pool|':>8}{'seconds':>10}")
    lines = [header, "-" * len(header)]
    for method in order:
        rs = by_method[method]
        mean = lambda attr: float(np.mean([getattr(r, attr) for r in rs]))
        pool = ("-" if rs[0].pool_size is None
                else f"{np.mean([r.pool_size for r in rs]):.1f}")
        lines.append(
            f"{method:<14}"
            f"{mean('mean_dice'):7.3f} ±{mean('std_dice'):.3f}"
            f"{mean('bwt'):8.3f} ±{mean('bwt_std'):.3f}"
            f"{mean('fwt'):8.3f} ±{mean('fwt_std'):.3f}"
            f"{pool:>8}"
            f"{mean('wall_seconds'):10.1f}")
    return "\n".join(lines)
