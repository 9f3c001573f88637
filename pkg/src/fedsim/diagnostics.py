"""Empirical verification of the participation assumptions and gradients.

The statistics here summarize windows of participation weights: how close
each client's window-averaged weight is to uniform, how concentrated the
per-round weights are, and how regular each client's recent participation
looks. Monte Carlo drivers compare the statistics against closed forms and
confidence bounds, and a finite-difference checker validates the objective
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import format_value, gaussians_from, rng_stream
from .objectives import Objective
from .participation import (CyclicScheduler, RegularizedScheduler, RoundParticipation,
                            ScaScheduler, Scheduler)

_EXACT_TOL = 1e-12


@dataclass
class WindowStats:
    """Statistics of one window of participation weights."""

    qbar: np.ndarray
    w: np.ndarray
    v_sq_lambda: float
    rho_sq_realized: float
    sampled_frac: float


@dataclass
class CheckResult:
    """One verification line: the decision statistic, what was expected,
    what was observed, and the verdict."""

    check: str
    statistic: float
    expected: float
    observed: float
    passed: bool


def window_matrix(window: list[RoundParticipation] | np.ndarray) -> np.ndarray:
    """Stack a window into a (rounds, clients) weight matrix."""
    if isinstance(window, np.ndarray):
        if window.ndim != 2:
            raise ValueError("window matrix must be two dimensional.")
        return window
    if not window:
        raise ValueError("window must contain at least one round.")
    return np.stack([part.weights for part in window])


class ParticipationHistory:
    """Tracks, per client, the weight column of its most recent window with
    any participation. Clients never seen have no history and are excluded
    from the regularity statistic."""

    def __init__(self, n_clients: int, window_len: int):
        self.z = np.zeros((n_clients, window_len))
        self.has_history = np.zeros(n_clients, dtype=bool)

    def observe(self, window: list[RoundParticipation] | np.ndarray) -> None:
        q = window_matrix(window)
        if q.shape != (self.z.shape[1], self.z.shape[0]):
            raise ValueError("window shape does not match the history tracker.")
        participated = q.sum(axis=0) > 0
        self.z[participated] = q[:, participated].T
        self.has_history |= participated

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        return self.z.copy(), self.has_history.copy()


def window_stats(window: list[RoundParticipation] | np.ndarray,
                 z_source=None) -> WindowStats:
    """Compute the window statistics.

    z_source supplies each client's reference weights for the regularity
    ratio: a ParticipationHistory (most recent participated window, the
    exact definition), a previous window (cheap approximation, exact when
    every sampled client participated in it), a (z, has_history) pair, or
    None to exclude every client from that term.
    """
    q = window_matrix(window)
    window_len, n_clients = q.shape
    qbar = q.mean(axis=0)

    # w_i averages, over reference clients j, the weight overlap between i
    # and j within the window, normalized by j's total participation.
    overlap = q.T @ q
    coef = np.zeros(n_clients)
    seen = qbar > 0
    coef[seen] = 1.0 / (window_len * qbar[seen])
    w = overlap @ coef / n_clients

    if z_source is None:
        z = np.zeros_like(q.T)
        has = np.zeros(n_clients, dtype=bool)
    elif isinstance(z_source, ParticipationHistory):
        z, has = z_source.snapshot()
    elif isinstance(z_source, tuple):
        z, has = z_source
    else:
        prev = window_matrix(z_source)
        if prev.shape != q.shape:
            raise ValueError("window length mismatch between the two windows.")
        z = prev.T
        has = prev.sum(axis=0) > 0
    v = qbar - 1.0 / n_clients
    v_sq_lambda = 0.0
    for i in np.flatnonzero(has):
        z_mean = z[i].mean()
        if z_mean <= 0:
            continue
        ratio = (z[i] ** 2).mean() / z_mean ** 2
        v_sq_lambda += v[i] ** 2 * ratio

    return WindowStats(
        qbar=qbar,
        w=w,
        v_sq_lambda=float(v_sq_lambda),
        rho_sq_realized=float((q ** 2).sum(axis=1).max()),
        sampled_frac=float(np.mean(seen)),
    )


# ---------------------------------------------------------------------------
# Closed forms (cyclic family with aligned windows)


def cyclic_qbar_variance(n_clients: int, k_bar: int, s_clients: int, window_len: int) -> float:
    return (1.0 / (s_clients * n_clients * window_len)) * (1.0 - s_clients * k_bar / n_clients)


def cyclic_v_sq_lambda_mean(n_clients: int, k_bar: int, s_clients: int) -> float:
    return (1.0 / s_clients) * (1.0 - s_clients * k_bar / n_clients)


def cyclic_w_mean(n_clients: int, k_bar: int, s_clients: int) -> float:
    """Expected non-uniformity statistic per client.

    Derived from the per-window inclusion probability s*k_bar/n of the
    cyclic family: a sampled client contributes s*k_bar/n * (overlap term
    s/(s*k_bar)) ... reduced, s*k_bar/n^2. Verified by exact enumeration in
    the tests.
    """
    return s_clients * k_bar / n_clients ** 2


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass
class MonteCarloStats:
    """Aggregates over independently sampled windows."""

    trials: int
    burn_in: int
    qbar_mean: np.ndarray
    qbar_var: np.ndarray
    qbar_pos_freq: np.ndarray
    w_mean: np.ndarray
    w_var: np.ndarray
    v_sq_lambda_mean: float
    v_sq_lambda_var: float
    v_sq_lambda_count: int
    rho_sq_max: float
    sum_q_max_dev: float
    fallback_rounds: int
    mean_sampled_frac: float


def sample_window(scheduler: Scheduler, window_index: int, seed: int, window_len: int) -> np.ndarray:
    """Weight matrix of the aligned window [t*P, (t+1)*P)."""
    rounds = range(window_index * window_len, (window_index + 1) * window_len)
    return np.stack([scheduler.sample_round(r, seed).weights for r in rounds])


def monte_carlo_stats(scheduler: Scheduler, trials: int, seed: int,
                      burn_in: int = 10) -> MonteCarloStats:
    """Sample `trials` aligned windows and aggregate every window statistic.

    The regularity statistic needs participation history, so its average
    skips the first `burn_in` windows while the tracker warms up.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1.")
    n = scheduler.n_clients
    window_len = scheduler.params().window
    rho_sq_nominal = scheduler.params().rho_sq
    history = ParticipationHistory(n, window_len)

    qbar_sum = np.zeros(n)
    qbar_sq_sum = np.zeros(n)
    qbar_pos = np.zeros(n)
    w_sum = np.zeros(n)
    w_sq_sum = np.zeros(n)
    vsl_sum = 0.0
    vsl_sq_sum = 0.0
    vsl_count = 0
    rho_sq_max = 0.0
    sum_q_max_dev = 0.0
    fallback = 0
    sampled_frac_sum = 0.0

    for t in range(trials):
        q = sample_window(scheduler, t, seed, window_len)
        stats = window_stats(q, history)
        history.observe(q)

        qbar_sum += stats.qbar
        qbar_sq_sum += stats.qbar ** 2
        qbar_pos += stats.qbar > 0
        w_sum += stats.w
        w_sq_sum += stats.w ** 2
        if t >= burn_in:
            vsl_sum += stats.v_sq_lambda
            vsl_sq_sum += stats.v_sq_lambda ** 2
            vsl_count += 1
        rho_sq_max = max(rho_sq_max, stats.rho_sq_realized)
        sum_q_max_dev = max(sum_q_max_dev, float(np.abs(q.sum(axis=1) - 1.0).max()))
        # A fallback round concentrates weight on fewer clients than the
        # nominal draw size, pushing the per-round concentration above the
        # pattern constant.
        fallback += int(((q ** 2).sum(axis=1) > rho_sq_nominal + _EXACT_TOL).sum())
        sampled_frac_sum += stats.sampled_frac

    qbar_mean = qbar_sum / trials
    w_mean = w_sum / trials
    vsl_mean = vsl_sum / vsl_count if vsl_count else 0.0
    vsl_var = vsl_sq_sum / vsl_count - vsl_mean ** 2 if vsl_count else 0.0
    return MonteCarloStats(
        trials=trials,
        burn_in=burn_in,
        qbar_mean=qbar_mean,
        qbar_var=np.maximum(qbar_sq_sum / trials - qbar_mean ** 2, 0.0),
        qbar_pos_freq=qbar_pos / trials,
        w_mean=w_mean,
        w_var=np.maximum(w_sq_sum / trials - w_mean ** 2, 0.0),
        v_sq_lambda_mean=vsl_mean,
        v_sq_lambda_var=max(vsl_var, 0.0),
        v_sq_lambda_count=vsl_count,
        rho_sq_max=rho_sq_max,
        sum_q_max_dev=sum_q_max_dev,
        fallback_rounds=fallback,
        mean_sampled_frac=sampled_frac_sum / trials,
    )


def _ratio(dev: np.ndarray, se: np.ndarray) -> np.ndarray:
    """Deviation in standard-error units.

    A zero SE means the statistic was constant across trials: agreement
    within tolerance maps to 0 and any real deviation to a signed infinity,
    so one-sided checks keep their direction.
    """
    out = np.zeros_like(dev)
    zero = se == 0
    out[~zero] = dev[~zero] / se[~zero]
    stuck = zero & (np.abs(dev) > _EXACT_TOL)
    out[stuck] = np.sign(dev[stuck]) * np.inf
    return out


def assumption_suite(scheduler: Scheduler, trials: int, seed: int = 0) -> list[CheckResult]:
    """Check the participation assumptions and both regularity bounds."""
    params = scheduler.params()
    n = scheduler.n_clients
    mc = monte_carlo_stats(scheduler, trials, seed)
    checks = []

    checks.append(CheckResult(
        check="sum_q_exact", statistic=mc.sum_q_max_dev, expected=_EXACT_TOL,
        observed=mc.sum_q_max_dev, passed=mc.sum_q_max_dev <= _EXACT_TOL))

    is_sca = isinstance(scheduler, ScaScheduler)
    rho_ok = mc.rho_sq_max <= params.rho_sq + _EXACT_TOL or is_sca
    checks.append(CheckResult(
        check="rho_sq_bound", statistic=mc.rho_sq_max, expected=params.rho_sq,
        observed=mc.rho_sq_max, passed=rho_ok))
    if is_sca:
        checks.append(CheckResult(
            check="sca_fallback_rounds", statistic=float(mc.fallback_rounds),
            expected=float("nan"), observed=float(mc.fallback_rounds), passed=True))

    se = np.sqrt(mc.qbar_var / mc.trials)
    dev_ratio = _ratio(mc.qbar_mean - 1.0 / n, se)
    worst = float(np.abs(dev_ratio).max())
    checks.append(CheckResult(
        check="window_unbiasedness", statistic=worst, expected=4.0,
        observed=float(np.abs(mc.qbar_mean - 1.0 / n).max()), passed=worst <= 4.0))

    freq = mc.qbar_pos_freq
    se = np.sqrt(np.maximum(freq * (1 - freq), 0.0) / mc.trials)
    short = _ratio(freq - params.p_sample, se)
    worst = float(short.min())
    checks.append(CheckResult(
        check="p_sample_floor", statistic=worst, expected=-4.0,
        observed=float(freq.min()), passed=worst >= -4.0))

    se = np.sqrt(mc.w_var / mc.trials)
    bound = params.window ** 2 / n
    excess = float(_ratio(mc.w_mean - bound, se).max())
    checks.append(CheckResult(
        check="w_mean_bound", statistic=excess, expected=4.0,
        observed=float(mc.w_mean.max()), passed=excess <= 4.0))

    if mc.v_sq_lambda_count:
        se_v = float(np.sqrt(mc.v_sq_lambda_var / mc.v_sq_lambda_count))
        stat = _ratio(np.array([mc.v_sq_lambda_mean - params.rho_sq]), np.array([se_v]))[0]
        checks.append(CheckResult(
            check="v_sq_lambda_bound", statistic=float(stat), expected=4.0,
            observed=mc.v_sq_lambda_mean, passed=stat <= 4.0))

    if isinstance(scheduler, RegularizedScheduler):
        dev = float(np.abs(mc.qbar_mean - 1.0 / n).max())
        exact = dev <= _EXACT_TOL and float(mc.qbar_var.max()) <= _EXACT_TOL
        checks.append(CheckResult(
            check="regularized_qbar_exact", statistic=dev, expected=_EXACT_TOL,
            observed=dev, passed=exact))

    if isinstance(scheduler, CyclicScheduler):
        expected = cyclic_qbar_variance(n, scheduler.k_bar, scheduler.s_clients, params.window)
        observed = float(mc.qbar_var.mean())
        rel = abs(observed - expected) / expected if expected else abs(observed)
        checks.append(CheckResult(
            check="qbar_variance_closed_form", statistic=rel, expected=expected,
            observed=observed, passed=rel <= 0.05))
    return checks


def qbar_variance_check(scheduler: Scheduler, trials: int, seed: int = 0) -> CheckResult:
    """Empirical window-averaged weight variance against its closed form."""
    if not isinstance(scheduler, CyclicScheduler):
        raise ValueError("the variance closed form applies to cyclic-family schedulers.")
    params = scheduler.params()
    mc = monte_carlo_stats(scheduler, trials, seed)
    expected = cyclic_qbar_variance(scheduler.n_clients, scheduler.k_bar,
                                    scheduler.s_clients, params.window)
    observed = float(mc.qbar_var.mean())
    rel = abs(observed - expected) / expected if expected else abs(observed)
    return CheckResult(check="qbar_variance_closed_form", statistic=rel,
                       expected=expected, observed=observed, passed=rel <= 0.05)


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(objective: Objective, n_points: int = 50, h: float = 1e-5,
               tol: float = 1e-6, seed: int = 0) -> CheckResult:
    """Max relative error of analytic gradients against central differences.

    Points are standard normal draws; clients rotate across points so every
    local gradient is exercised, not just the average.
    """
    if h <= 0:
        raise ValueError("h must be > 0.")
    rng = rng_stream(seed, "init", 0, 1)
    worst = 0.0
    for point in range(n_points):
        x = gaussians_from(rng, objective.dim, 1.0)
        client = point % objective.n_clients
        analytic = objective.grad_local(client, x)
        fd = np.empty_like(analytic)
        for j in range(objective.dim):
            bump = np.zeros(objective.dim)
            bump[j] = h
            fd[j] = (objective.eval_local(client, x + bump)
                     - objective.eval_local(client, x - bump)) / (2 * h)
        scale = max(float(np.linalg.norm(analytic)), 1e-8)
        worst = max(worst, float(np.linalg.norm(fd - analytic)) / scale)
    return CheckResult(check="grad_check", statistic=worst, expected=tol,
                       observed=worst, passed=worst <= tol)


# ---------------------------------------------------------------------------
# Reporting


def format_report(checks: list[CheckResult]) -> str:
    lines = []
    for c in checks:
        verdict = "PASS" if c.passed else "FAIL"
        lines.append(f"{verdict}  {c.check:32s} statistic={format_value(c.statistic):<24s} "
                     f"expected={format_value(c.expected):<24s} observed={format_value(c.observed)}")
    failed = sum(not c.passed for c in checks)
    lines.append(f"{len(checks) - failed} of {len(checks)} checks passed.")
    return "\n".join(lines)


def checks_to_csv_rows(checks: list[CheckResult]) -> list[str]:
    rows = ["check,statistic,expected,observed,pass"]
    for c in checks:
        rows.append(",".join([c.check, format_value(c.statistic), format_value(c.expected),
                              format_value(c.observed), str(c.passed)]))
    return rows
