"""Acceptance gate: one test per shipped guarantee, at its stated tolerance.

Slow tests carry their own wall-clock budgets, so a green run certifies both
the numbers and the runtimes.
"""

import time
from pathlib import Path

import numpy as np

from fedsim.algorithms import Simulation
from fedsim.core import apply_overrides, build_run_config, parse_config_text
from fedsim.data import make_blobs, partition_by_similarity
from fedsim.diagnostics import assumption_suite, grad_check, monte_carlo_stats
from fedsim.harness import build_objective, rounds_to_target, run_once, run_record_csv
from fedsim.objectives import Logistic, Quadratic, SyntheticHard
from fedsim.participation import (
    CyclicScheduler,
    GroupedCyclicScheduler,
    IidScheduler,
    RegularizedScheduler,
    make_scheduler,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
ALGORITHMS = ("fedavg", "fedprox", "scaffold", "amp_fedavg", "amp_scaffold")


def _config(name: str, *overrides: str):
    values = parse_config_text((CONFIGS / name).read_text())
    return build_run_config(apply_overrides(values, list(overrides)))


def test_criterion_1():
    # convergence ordering on the nonsmooth synthetic problem: the windowed
    # control-variate method crosses train loss 0.2 within [400, 1200]
    # rounds, plain averaging needs >= 3x its rounds, and per-round control
    # variates are expected to need >= 1.5x
    start = time.monotonic()
    hits = {}
    for algo in ALGORITHMS:
        hits[algo] = []
        for seed in range(5):
            cfg = _config(f"synthetic_{algo}.cfg", f"seed={seed}")
            record = run_once(cfg)
            hits[algo].append(rounds_to_target(record, cfg.target_value))
    elapsed = time.monotonic() - start

    def seeds_separated(algo: str, factor: float) -> int:
        good = 0
        for amp, base in zip(hits["amp_scaffold"], hits[algo]):
            if amp is None:
                continue
            # a baseline that never reaches the target needed more than the
            # full budget, which satisfies any multiple of the band
            if base is None or base >= factor * amp:
                good += 1
        return good

    in_band = sum(1 for h in hits["amp_scaffold"] if h is not None and 400 <= h <= 1200)
    assert in_band >= 4, f"amp_scaffold rounds to target: {hits['amp_scaffold']}"
    assert seeds_separated("fedavg", 3.0) >= 4, \
        f"fedavg {hits['fedavg']} vs amp_scaffold {hits['amp_scaffold']}"
    assert seeds_separated("amp_fedavg", 3.0) >= 4, \
        f"amp_fedavg {hits['amp_fedavg']} vs amp_scaffold {hits['amp_scaffold']}"
    assert elapsed <= 300.0, f"took {elapsed:.1f}s"
    assert seeds_separated("scaffold", 1.5) >= 4, (
        f"scaffold reached the target in {hits['scaffold']} rounds vs amp_scaffold's "
        f"{hits['amp_scaffold']}: both methods are rate-limited by the same slow "
        f"coordinate at the shared effective step size, so they cross at the same "
        f"evaluation mark and the 1.5x separation never appears")


def test_criterion_2():
    # with no noise, full participation, one local step, window 1 and no
    # amplification, the windowed control-variate method is plain gradient
    # descent on the mean objective
    start = time.monotonic()
    centers = np.array([[1.0, 0.0, -2.0], [-1.0, 2.0, 0.5], [0.25, -0.75, 1.5]])
    cfg = build_run_config({
        "n_clients": "3", "s_clients": "3", "rounds": "100",
        "algorithm": "amp_scaffold", "gamma": "1.0", "eta": "0.1",
        "local_steps": "1", "objective": "quadratic",
        "centers": "1,0,-2; -1,2,0.5; 0.25,-0.75,1.5", "sigma": "0",
    })
    sim = Simulation(build_objective(cfg), make_scheduler(cfg), cfg)
    x = np.zeros(3)
    mean_center = centers.mean(axis=0)
    worst = 0.0
    for r in range(cfg.rounds):
        sim.run_round(r)
        x = x - cfg.eta * (x - mean_center)
        worst = max(worst, float(np.abs(sim.model - x).max()))
    sim.close()
    elapsed = time.monotonic() - start
    assert worst <= 1e-12, f"max per-coordinate gap {worst:.3e}"
    assert elapsed < 1.0, f"took {elapsed:.2f}s"


def test_criterion_3():
    # analytic gradients agree with central differences on all objectives
    start = time.monotonic()
    features, labels = make_blobs(200, 3, 4, seed=0)
    shards = partition_by_similarity(features, labels, 4, 50.0, seed=0)
    objectives = [
        SyntheticHard(),
        Quadratic(np.array([[1.0, -2.0, 0.5], [-1.0, 0.25, 2.0]])),
        Logistic(shards, num_classes=3, l2=0.01),
    ]
    for objective in objectives:
        check = grad_check(objective, n_points=50, h=1e-5, tol=1e-6)
        assert check.passed, f"{type(objective).__name__}: {check.statistic:.3e}"
    elapsed = time.monotonic() - start
    assert elapsed < 5.0, f"took {elapsed:.2f}s"


def test_criterion_4():
    # window statistics of the 4-client, 2-group, 1-per-round cyclic pattern
    # against closed forms, 1e5 windows at a fixed seed
    start = time.monotonic()
    mc = monte_carlo_stats(CyclicScheduler(4, 2, 1), trials=100_000, seed=12345)
    elapsed = time.monotonic() - start

    var = float(mc.qbar_var.mean())
    assert abs(var - 1 / 16) <= 0.05 * (1 / 16), f"Var[qbar] = {var:.6f}"
    assert mc.v_sq_lambda_mean <= 1.0 + 1e-9
    assert abs(mc.v_sq_lambda_mean - 0.5) <= 0.10 * 0.5, \
        f"mean regularity statistic = {mc.v_sq_lambda_mean:.6f}"
    assert elapsed < 30.0, f"took {elapsed:.1f}s"
    w_mean = float(mc.w_mean.mean())
    assert abs(w_mean - 1 / 16) <= 0.05 * (1 / 16), (
        f"client-averaged non-uniformity statistic is {w_mean:.6f}; exact "
        f"enumeration of all four equally likely windows of this pattern gives "
        f"0.125 for every outcome, so the 1/16 target is unattainable")


def test_criterion_5():
    # participation assumptions hold on every pattern at 1e4 trials, and the
    # round-robin pattern is exactly uniform
    for sched in (IidScheduler(20, 5), CyclicScheduler(20, 5, 2),
                  GroupedCyclicScheduler(20, 5, 2, 3), RegularizedScheduler(20, 5)):
        checks = assumption_suite(sched, trials=10_000, seed=0)
        by_name = {c.check: c for c in checks}
        failed = [c.check for c in checks if not c.passed]
        assert not failed, f"{type(sched).__name__}: {failed}"
        for required in ("sum_q_exact", "window_unbiasedness", "p_sample_floor"):
            assert required in by_name
        if isinstance(sched, RegularizedScheduler):
            assert by_name["regularized_qbar_exact"].passed


def test_criterion_6():
    # reduction invariants: window + gamma=1 is plain averaging, mu=0 is
    # plain averaging, and the refreshed variates always average to the
    # global one
    trim = ("rounds=960",)
    plain = run_record_csv(run_once(_config("synthetic_fedavg.cfg", *trim)))
    windowed = run_record_csv(run_once(_config(
        "synthetic_fedavg.cfg", "algorithm=amp_fedavg", "gamma=1.0", *trim)))
    assert windowed == plain
    prox = run_record_csv(run_once(_config(
        "synthetic_fedavg.cfg", "algorithm=fedprox", "mu=0.0", *trim)))
    assert prox == plain

    cfg = _config("synthetic_amp_scaffold.cfg", "rounds=960")
    sim = Simulation(build_objective(cfg), make_scheduler(cfg), cfg)
    refreshes = 0
    try:
        for r in range(cfg.rounds):
            sim.run_round(r)
            if (r + 1) % sim.window_len == 0:
                gap = float(np.linalg.norm(sim.cv.global_cv - sim.cv.per_client.mean(axis=0)))
                assert gap <= 1e-12, f"refresh at round {r + 1}: gap {gap:.3e}"
                refreshes += 1
    finally:
        sim.close()
    assert refreshes == 2


def test_criterion_7():
    # desk-scale classification: mean final train loss over 3 seeds of the
    # windowed control-variate method beats the averaging baselines and
    # stays within 5% of per-round control variates
    start = time.monotonic()
    means = {}
    for algo in ALGORITHMS:
        finals = []
        for seed in range(3):
            record = run_once(_config(f"desk_{algo}.cfg", f"seed={seed}"))
            assert not record.diverged, f"{algo} seed {seed} diverged"
            finals.append(record.final_loss)
        means[algo] = sum(finals) / len(finals)
    elapsed = time.monotonic() - start

    amp = means["amp_scaffold"]
    for other in ("fedavg", "fedprox", "amp_fedavg"):
        assert amp <= means[other], f"amp_scaffold {amp:.5f} vs {other} {means[other]:.5f}"
    assert amp <= 1.05 * means["scaffold"], \
        f"amp_scaffold {amp:.5f} vs scaffold {means['scaffold']:.5f}"
    assert elapsed <= 600.0, f"took {elapsed:.1f}s"


def test_criterion_8():
    # thread count changes scheduling, never bytes
    cfg = _config("synthetic_amp_scaffold.cfg")
    serial = run_record_csv(run_once(cfg, threads=1))
    threaded = run_record_csv(run_once(cfg, threads=8))
    assert serial == threaded
