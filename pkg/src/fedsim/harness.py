"""End-to-end runs: build the pieces from a config, loop over rounds,
record metrics, and serialize results as CSV.

Evaluation never consumes training randomness (metric computation is
deterministic and the random streams are purpose-tagged), so changing the
evaluation schedule cannot change a trajectory. All files are written
atomically and floats are serialized in shortest round-trip form, which
makes re-runs byte-identical.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .algorithms import DivergenceError, Simulation
from .core import ConfigError, ExperimentSpec, RunConfig, RunRecord, build_run_config, format_value, validate_run_config
from .data import _atomic_write, load_idx, make_blobs, partition_by_similarity
from .objectives import Logistic, Objective, Quadratic, SyntheticHard
from .participation import make_scheduler

RUN_CSV_HEADER = "round,grad_norm,train_loss,test_metric,uplink_scalars"


def parse_centers(text: str) -> np.ndarray:
    """Parse per-client center vectors: clients split by ';', coordinates by ','."""
    try:
        rows = [[float(v) for v in part.split(",") if v.strip()]
                for part in text.split(";") if part.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse centers: {text!r}") from None
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise ConfigError("centers must give every client the same number of coordinates.")
    return np.array(rows)


def build_objective(cfg: RunConfig) -> Objective:
    if cfg.objective == "synthetic_hard":
        return SyntheticHard(cfg.h, cfg.kappa, cfg.sigma, cfg.c, cfg.mu_pl)
    if cfg.objective == "quadratic":
        centers = parse_centers(cfg.centers)
        if centers.shape[0] != cfg.n_clients:
            raise ConfigError(f"centers define {centers.shape[0]} clients, config says {cfg.n_clients}.")
        return Quadratic(centers, cfg.sigma)
    if cfg.objective == "logistic":
        train, test = load_dataset(cfg)
        shards = partition_by_similarity(train[0], train[1], cfg.n_clients,
                                         cfg.similarity, cfg.seed)
        num_classes = int(train[1].max()) + 1
        return Logistic(shards, num_classes, cfg.l2, cfg.minibatch, test)
    raise ConfigError(f"unknown objective: {cfg.objective!r}")


def load_dataset(cfg: RunConfig):
    """Training set and optional test set for the logistic objective."""
    if cfg.dataset == "idx":
        train = load_idx(cfg.images_path, cfg.labels_path)
        test = None
        if cfg.test_images_path and cfg.test_labels_path:
            test = load_idx(cfg.test_images_path, cfg.test_labels_path)
        return train, test
    train = make_blobs(cfg.blob_samples, cfg.blob_classes, cfg.blob_features, cfg.seed)
    test = None
    if cfg.blob_test_samples > 0:
        test = make_blobs(cfg.blob_test_samples, cfg.blob_classes, cfg.blob_features,
                          cfg.seed, stream_index=2)
    return train, test


def _eval_rounds(rounds: int, eval_every: int) -> list[int]:
    marks = set(range(0, rounds + 1, eval_every))
    marks.add(rounds)
    return sorted(marks)


def run_once(cfg: RunConfig, threads: int = 1) -> RunRecord:
    """Execute one seeded run and return its metric record.

    A run whose loss or iterates leave the finite range is truncated at the
    last finite evaluation and flagged, not raised.
    """
    cfg = validate_run_config(cfg)
    objective = build_objective(cfg)
    scheduler = make_scheduler(cfg)
    sim = Simulation(objective, scheduler, cfg, threads=threads)

    marks = _eval_rounds(cfg.rounds, cfg.eval_every)
    rounds: list[int] = []
    grad_norms: list[float] = []
    losses: list[float] = []
    test_metrics: list[float] = []
    uplink: list[int] = []
    diverged = False

    def record(round_idx: int) -> bool:
        x = sim.model
        with np.errstate(over="ignore", invalid="ignore"):
            loss = objective.eval_global(x)
            gnorm = float(np.linalg.norm(objective.grad_global(x)))
        if not (math.isfinite(loss) and math.isfinite(gnorm)):
            return False
        rounds.append(round_idx)
        grad_norms.append(gnorm)
        losses.append(loss)
        test_metrics.append(objective.test_metric(x))
        uplink.append(sim.uplink_scalars)
        return True

    try:
        diverged = not record(0)
        if not diverged:
            for r in range(cfg.rounds):
                try:
                    sim.run_round(r)
                except DivergenceError:
                    diverged = True
                    break
                if (r + 1) in marks and not record(r + 1):
                    diverged = True
                    break
    finally:
        sim.close()
    return RunRecord(rounds=rounds, grad_norms=grad_norms, train_losses=losses,
                     test_metrics=test_metrics, uplink_scalars=uplink, diverged=diverged)


def rounds_to_target(record: RunRecord, target: float) -> int | None:
    """First recorded round whose train loss is at or below the target."""
    for round_idx, loss in zip(record.rounds, record.train_losses):
        if loss <= target:
            return round_idx
    return None


def run_record_csv(record: RunRecord) -> str:
    lines = [RUN_CSV_HEADER]
    for i in range(len(record.rounds)):
        lines.append(",".join([
            str(record.rounds[i]),
            format_value(record.grad_norms[i]),
            format_value(record.train_losses[i]),
            format_value(record.test_metrics[i]),
            str(record.uplink_scalars[i]),
        ]))
    return "\n".join(lines) + "\n"


def write_run_csv(record: RunRecord, path: str) -> None:
    _atomic_write(path, run_record_csv(record).encode())


# ---------------------------------------------------------------------------
# Grid runner


@dataclass
class GridCellResult:
    cell_id: int
    overrides: dict[str, str]
    mean_final_loss: float
    std_final_loss: float
    mean_rounds_to_target: float
    diverged_runs: int


def run_grid(spec: ExperimentSpec, threads: int = 1) -> list[GridCellResult]:
    """Run every grid cell for every seed; cells expand in key order."""
    results = []
    for cell_id, cell in enumerate(spec.cells()):
        finals = []
        reached = []
        diverged = 0
        for seed in spec.seeds:
            values = dict(spec.base)
            values.update(cell)
            values["seed"] = str(seed)
            cfg = build_run_config(values)
            record = run_once(cfg, threads=threads)
            finals.append(record.final_loss)
            diverged += int(record.diverged)
            if not math.isnan(cfg.target_value):
                hit = rounds_to_target(record, cfg.target_value)
                if hit is not None:
                    reached.append(hit)
        finals_arr = np.array(finals, dtype=float)
        results.append(GridCellResult(
            cell_id=cell_id,
            overrides=cell,
            mean_final_loss=float(np.mean(finals_arr)),
            std_final_loss=float(np.std(finals_arr)),
            mean_rounds_to_target=float(np.mean(reached)) if reached else float("nan"),
            diverged_runs=diverged,
        ))
    return results


def grid_csv(results: list[GridCellResult], grid_keys: list[str]) -> str:
    lines = ["cell_id," + ",".join(grid_keys) + ",mean_final_loss,std_final_loss,mean_rounds_to_target"]
    for cell in results:
        fields = [str(cell.cell_id)]
        fields.extend(cell.overrides[k] for k in grid_keys)
        fields.append(format_value(cell.mean_final_loss))
        fields.append(format_value(cell.std_final_loss))
        fields.append(format_value(cell.mean_rounds_to_target))
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def write_grid_csv(results: list[GridCellResult], grid_keys: list[str], path: str) -> None:
    _atomic_write(path, grid_csv(results, grid_keys).encode())


def best_cell(results: list[GridCellResult]) -> GridCellResult:
    """Cell with the lowest mean final loss; NaN means always lose."""
    if not results:
        raise ValueError("no grid cells to compare.")
    return min(results, key=lambda c: (math.isnan(c.mean_final_loss), c.mean_final_loss))
