"""Convergence-theory quantities and empirical inequality checks.

Closed-form pieces (heterogeneity, weighting skew, coefficient-ratio
statistics, the speed/error bound evaluations) plus check routines that
test the theory's inequalities on recorded runs:

* smoothness gap: ||grad F(w)||^2 <= 2L (F(w) - F*)
* client drift: p-weighted squared discrepancy from the virtual mean
  stays under 16 eta_{t0}^2 E^2 G^2
* distance recursion: per-round contraction of E||w - w*||^2
* rate envelope: E[F(w_T)] - F* <= V/(T+gamma) + E_err, with an O(1/T)
  tail-slope fit

Expectations are estimated by averaging independent seeded runs; checks
allow three standard errors of Monte-Carlo slack (or an exact tolerance
for deterministic fixtures).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .objectives import QuadraticObjective, global_objective

KAPPA_FLOOR = 1e-9
RHO_DENOM_TOL = 1e-12


def heterogeneity(objectives: Sequence[QuadraticObjective], p) -> float:
    """Gamma = F(w*) - sum_i p_i F_i(w_i*); nonnegative up to roundoff."""
    p = np.asarray(p, dtype=np.float64)
    glob = global_objective(list(objectives), p)
    _, f_star = glob.optimum()
    weighted = sum(pi * o.optimum()[1] for pi, o in zip(p, objectives))
    gamma = f_star - weighted
    if gamma < -1e-10 * max(1.0, abs(f_star)):
        raise ArithmeticError(f"heterogeneity {gamma!r} is negative beyond roundoff")
    return max(gamma, 0.0)


def weighting_skew(alpha, gaps, f_w: float, weighted_f_star: float) -> Optional[float]:
    """rho = sum_i alpha_i gap_i / (F(w) - sum_i p_i F_i*).

    Returns None when the denominator vanishes (the undefined case); such
    rounds are excluded from the min/max extremes.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    gaps = np.asarray(gaps, dtype=np.float64)
    numerator = float(alpha @ gaps)
    denominator = f_w - weighted_f_star
    if abs(denominator) < RHO_DENOM_TOL * max(1.0, abs(numerator)):
        return None
    return numerator / denominator


def kappa_stats(alpha, p) -> tuple[float, float]:
    """(min, max) of kappa_i = alpha_i / p_i.

    Zero coefficients are floored at 1e-9 before dividing, with the added
    mass taken proportionally from the positive entries, so the ratios are
    always finite and positive.
    """
    alpha = np.asarray(alpha, dtype=np.float64).copy()
    p = np.asarray(p, dtype=np.float64)
    if (p <= 0).any():
        raise ValueError("p entries must be positive")
    zero = alpha <= 0.0
    if zero.any():
        added = KAPPA_FLOOR * zero.sum()
        alpha[~zero] *= 1.0 - added
        alpha[zero] = KAPPA_FLOOR
    kappa = alpha / p
    return float(kappa.min()), float(kappa.max())


@dataclass
class TheoryConstants:
    """Checkable constants of one quadratic federation.

    mu and L are the extreme curvature eigenvalues over the client set, so
    every client (and hence the global objective) satisfies the curvature
    assumptions with these values.  sigma2 is the configured total noise
    variance E||g - grad F||^2; G_hat is the running max of ||g|| observed
    across runs (the bounded-norm constant has no closed form).
    """

    mu: float
    L: float
    sigma2: float
    G_hat: float
    Gamma: float
    gamma: float
    w0_dist2: float

    def __post_init__(self):
        if not 0 < self.mu <= self.L:
            raise ValueError("need 0 < mu <= L")
        if self.Gamma < 0 or self.gamma <= 0:
            raise ValueError("need Gamma >= 0 and gamma > 0")

    @classmethod
    def from_problem(
        cls,
        objectives: Sequence[QuadraticObjective],
        p,
        w0: np.ndarray,
        g_hat: float = float("nan"),
    ) -> "TheoryConstants":
        mus, ells = zip(*(o.smoothness_constants() for o in objectives))
        mu, ell = min(mus), max(ells)
        glob = global_objective(list(objectives), np.asarray(p, dtype=np.float64))
        w_star, _ = glob.optimum()
        return cls(
            mu=mu,
            L=ell,
            sigma2=max(o.gradient_noise_sq() for o in objectives),
            G_hat=g_hat,
            Gamma=heterogeneity(objectives, p),
            gamma=4.0 * ell / mu,
            w0_dist2=float(np.sum((np.asarray(w0, dtype=np.float64) - w_star) ** 2)),
        )


def bound_V_E(
    constants: TheoryConstants,
    rho_bar: float,
    rho_tilde: float,
    local_steps: int,
) -> tuple[float, float, float]:
    """(V, E_err, V_min) of the 1/(T+gamma) convergence bound.

    V   = 4L(32 E^2 G^2 + sigma^2) / (3 mu^2 rho_bar)
        + 8 L^2 Gamma / mu^2 + L gamma ||w0 - w*||^2 / 2
    E   = (8 L Gamma / 3 mu)(rho_tilde / rho_bar - 1)
    V_min drops the rho-dependent term: the floor no weighting can beat.
    """
    if rho_bar <= 0:
        raise ValueError(f"rho_bar must be positive, got {rho_bar}")
    c = constants
    speed = 4.0 * c.L * (32.0 * local_steps**2 * c.G_hat**2 + c.sigma2) / (
        3.0 * c.mu**2 * rho_bar
    )
    v_min = 8.0 * c.L**2 * c.Gamma / c.mu**2 + c.L * c.gamma * c.w0_dist2 / 2.0
    err = (8.0 * c.L * c.Gamma / (3.0 * c.mu)) * (rho_tilde / rho_bar - 1.0)
    return speed + v_min, err, v_min


def final_bound(
    pi: float,
    p_min: float,
    constants: TheoryConstants,
    t_rounds: int,
    local_steps: int,
    n_clients: int,
) -> float:
    """Worst-case bound driven only by the smallest coefficient ratio pi.

    (1/(T+gamma)) [C + lambda1/pi] + lambda2 (1/(pi min_i p_i) - N) with
    C the strategy-independent speed floor.
    """
    if pi <= 0 or p_min <= 0:
        raise ValueError("pi and p_min must be positive")
    c = constants
    _, _, v_min = bound_V_E(constants, 1.0, 1.0, local_steps)
    lam1 = 4.0 * c.L * (32.0 * local_steps**2 * c.G_hat**2 + c.sigma2) / (3.0 * c.mu**2)
    lam2 = 8.0 * c.L * c.Gamma / (3.0 * c.mu)
    return (v_min + lam1 / pi) / (t_rounds + c.gamma) + lam2 * (
        1.0 / (pi * p_min) - n_clients
    )


@dataclass
class SkewTrajectory:
    """Per-round skew and coefficient-ratio statistics of one or more runs."""

    rho_at_iterates: list  # rho(t, w_t) per round, None where undefined
    rho_at_optimum: list  # rho(t, w*) per round, None where undefined
    pi_t: list
    Pi_t: list

    @property
    def rho_bar(self) -> float:
        vals = [r for r in self.rho_at_iterates if r is not None]
        return min(vals) if vals else float("nan")

    @property
    def rho_tilde(self) -> float:
        vals = [r for r in self.rho_at_optimum if r is not None]
        return max(vals) if vals else float("nan")

    @property
    def pi(self) -> float:
        return min(self.pi_t) if self.pi_t else float("nan")

    @property
    def Pi(self) -> float:
        return max(self.Pi_t) if self.Pi_t else float("nan")

    @classmethod
    def from_records(cls, records) -> "SkewTrajectory":
        traj = cls([], [], [], [])
        for rec in records:
            traj.rho_at_iterates.append(rec.rho_wt)
            traj.rho_at_optimum.append(rec.rho_wstar)
            lo, hi = kappa_stats(rec.alpha, rec.p_selected)
            traj.pi_t.append(lo)
            traj.Pi_t.append(hi)
        return traj


def ensemble_skew(results) -> tuple[float, float]:
    """(rho_bar, rho_tilde) over every round of every run."""
    lo, hi = [], []
    for res in results:
        for rec in res.records:
            if rec.rho_wt is not None:
                lo.append(rec.rho_wt)
            if rec.rho_wstar is not None:
                hi.append(rec.rho_wstar)
    if not lo or not hi:
        raise ValueError("no defined skew values in the supplied runs")
    return min(lo), max(hi)


@dataclass
class CheckReport:
    name: str
    rounds_tested: int
    violations: int
    worst_margin: float  # max of (lhs - allowed); <= 0 means clean
    passed: bool
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rounds_tested": self.rounds_tested,
            "violations": self.violations,
            "worst_margin": self.worst_margin,
            "passed": self.passed,
            "detail": self.detail,
        }


def check_smoothness_gap(
    quadratic: QuadraticObjective,
    n_samples: int,
    rng: np.random.Generator,
) -> CheckReport:
    """||grad F(w)||^2 <= 2L (F(w) - F*) on random w, tight on the top eigenvector."""
    w_star, f_star = quadratic.optimum()
    _, ell = quadratic.smoothness_constants()
    dim = quadratic.dim
    worst = 0.0
    violations = 0
    tested = 0
    for _ in range(n_samples):
        direction = rng.standard_normal(dim)
        radius = 10.0 ** rng.uniform(-2, 2)
        w = w_star + radius * direction / np.linalg.norm(direction)
        gap = quadratic.loss(w) - f_star
        if gap <= 0:
            continue
        ratio = float(np.sum(quadratic.grad(w) ** 2) / (2.0 * ell * gap))
        tested += 1
        worst = max(worst, ratio)
        if ratio > 1.0 + 1e-9:
            violations += 1
    eigvals, eigvecs = np.linalg.eigh(quadratic.A)
    w_top = w_star + eigvecs[:, -1]
    top_gap = quadratic.loss(w_top) - f_star
    top_ratio = float(np.sum(quadratic.grad(w_top) ** 2) / (2.0 * ell * top_gap))
    tight = abs(top_ratio - 1.0) <= 1e-9
    return CheckReport(
        name="smoothness_gap",
        rounds_tested=tested,
        violations=violations,
        worst_margin=worst - 1.0,
        passed=violations == 0 and tight,
        detail={"worst_ratio": worst, "top_eigenvector_ratio": top_ratio},
    )


def _round_start_rate(config, round_index: int) -> float:
    steps = config.local_epochs
    return config.schedule.rate(round_index * steps, round_index)


def check_client_drift(results, constants: TheoryConstants) -> CheckReport:
    """Seed-averaged p-weighted drift vs 16 eta_{t0}^2 E^2 G^2 per interior step.

    Requires theory-track runs with retained trajectories and full
    participation; the run set plays the role of the expectation.
    """
    if not results:
        raise ValueError("no runs supplied")
    first = results[0]
    if first.trajectories is None:
        raise ValueError("runs were executed without retained trajectories")
    config = first.config
    n_rounds = len(first.records)
    steps = config.local_epochs
    p = np.asarray(first.records[0].p_selected, dtype=np.float64)
    violations = 0
    tested = 0
    worst = -math.inf
    for r in range(n_rounds):
        bound = 16.0 * _round_start_rate(config, r) ** 2 * steps**2 * constants.G_hat**2
        for s in range(1, steps + 1):
            samples = np.empty(len(results))
            for j, res in enumerate(results):
                iterates = res.trajectories[r]  # (m, steps+1, dim)
                snapshot = iterates[:, s, :]
                virtual = p @ snapshot
                samples[j] = p @ np.sum((snapshot - virtual) ** 2, axis=1)
            mean = samples.mean()
            se = samples.std(ddof=1) / math.sqrt(len(samples)) if len(samples) > 1 else 0.0
            margin = mean - (bound + 3.0 * se)
            tested += 1
            worst = max(worst, margin)
            if margin > 0:
                violations += 1
    return CheckReport(
        name="client_drift",
        rounds_tested=tested,
        violations=violations,
        worst_margin=worst,
        passed=violations == 0,
        detail={"local_steps": steps, "g_hat": constants.G_hat},
    )


def check_distance_recursion(
    results,
    constants: TheoryConstants,
    w_star: np.ndarray,
    exact: bool = False,
    tol: float = 1e-9,
    min_pass_fraction: float = 1.0,
) -> CheckReport:
    """Per-round contraction of the squared distance to the optimum.

    E||w_{r+1}-w*||^2 <= (1 - eta mu (1 + 3/8 rho_bar)) E||w_r-w*||^2
                         + eta^2 (32 E^2 G^2 + 6 rho_bar L Gamma + sigma^2)
                         + 2 eta Gamma (rho_tilde - rho_bar)
    with eta the round-start rate and rho extremes measured over the runs.
    In Monte-Carlo mode each round gets 3 standard errors of slack; exact
    mode (deterministic fixtures) uses a relative tolerance instead.
    """
    if not results:
        raise ValueError("no runs supplied")
    first = results[0]
    if first.global_models is None:
        raise ValueError("runs were executed without recorded global models")
    config = first.config
    steps = config.local_epochs
    eta0 = _round_start_rate(config, 0)
    if eta0 > 1.0 / (4.0 * constants.L) + 1e-12:
        raise ValueError(
            f"schedule starts at eta={eta0!r}, above the 1/(4L) precondition"
        )
    rho_bar, rho_tilde = ensemble_skew(results)
    w_star = np.asarray(w_star, dtype=np.float64)
    dist2 = np.stack(
        [np.sum((res.global_models - w_star) ** 2, axis=1) for res in results]
    )  # (n_runs, T+1)
    n_rounds = dist2.shape[1] - 1
    violations = 0
    worst = -math.inf
    for r in range(n_rounds):
        eta = _round_start_rate(config, r)
        contraction = 1.0 - eta * constants.mu * (1.0 + 0.375 * rho_bar)
        additive = eta**2 * (
            32.0 * steps**2 * constants.G_hat**2
            + 6.0 * rho_bar * constants.L * constants.Gamma
            + constants.sigma2
        ) + 2.0 * eta * constants.Gamma * (rho_tilde - rho_bar)
        samples = dist2[:, r + 1] - contraction * dist2[:, r] - additive
        mean = samples.mean()
        if exact:
            allowance = tol * max(1.0, abs(contraction * dist2[:, r].mean() + additive))
        else:
            se = samples.std(ddof=1) / math.sqrt(len(samples)) if len(samples) > 1 else 0.0
            allowance = 3.0 * se
        margin = mean - allowance
        worst = max(worst, margin)
        if margin > 0:
            violations += 1
    passed = (n_rounds - violations) >= min_pass_fraction * n_rounds
    return CheckReport(
        name="distance_recursion",
        rounds_tested=n_rounds,
        violations=violations,
        worst_margin=worst,
        passed=passed,
        detail={"rho_bar": rho_bar, "rho_tilde": rho_tilde, "exact": exact},
    )


def check_rate_envelope(
    results,
    constants: TheoryConstants,
    f_star: float,
    require_slope: bool = True,
    slope_limit: float = -0.8,
) -> CheckReport:
    """Seed-averaged F(w_T) - F* against V/(T+gamma) + E_err at every round,
    plus a log-log tail-slope fit as the O(1/T)-trend check."""
    if not results:
        raise ValueError("no runs supplied")
    config = results[0].config
    rho_bar, rho_tilde = ensemble_skew(results)
    v, e_err, _ = bound_V_E(constants, rho_bar, rho_tilde, config.local_epochs)
    losses = np.stack(
        [[rec.global_loss for rec in res.records] for res in results]
    )  # (n_runs, T); entry r is F(w_{r+1})
    mean_gap = losses.mean(axis=0) - f_star
    n_rounds = mean_gap.shape[0]
    t_axis = np.arange(1, n_rounds + 1, dtype=np.float64)
    envelope = v / (t_axis + constants.gamma) + e_err
    margins = mean_gap - envelope
    violations = int((margins > 0).sum())

    slope = float("nan")
    tail = np.arange(n_rounds // 2, n_rounds)
    excess = mean_gap[tail] - e_err
    if (excess > 0).all():
        slope = float(
            np.polyfit(np.log(t_axis[tail] + constants.gamma), np.log(excess), 1)[0]
        )
    slope_ok = (not require_slope) or (not math.isnan(slope) and slope <= slope_limit)
    return CheckReport(
        name="rate_envelope",
        rounds_tested=n_rounds,
        violations=violations,
        worst_margin=float(margins.max()),
        passed=violations == 0 and slope_ok,
        detail={
            "speed_bound": v,
            "error_bound": e_err,
            "tail_slope": slope,
            "rho_bar": rho_bar,
            "rho_tilde": rho_tilde,
        },
    )


def build_theory_report(
    constants: TheoryConstants,
    skew: SkewTrajectory,
    checks: Sequence[CheckReport],
    extra: dict | None = None,
) -> dict:
    """JSON-ready document: constants, skew trajectory, check outcomes."""
    report = {
        "constants": {
            "mu": constants.mu,
            "L": constants.L,
            "noise_variance": constants.sigma2,
            "grad_norm_bound_estimate": constants.G_hat,
            "heterogeneity": constants.Gamma,
            "schedule_offset_gamma": constants.gamma,
            "initial_distance_sq": constants.w0_dist2,
        },
        "skew": {
            "rho_at_iterates": skew.rho_at_iterates,
            "rho_at_optimum": skew.rho_at_optimum,
            "rho_bar": skew.rho_bar,
            "rho_tilde": skew.rho_tilde,
            "kappa_min_per_round": skew.pi_t,
            "kappa_max_per_round": skew.Pi_t,
            "kappa_min": skew.pi,
            "kappa_max": skew.Pi,
        },
        "checks": [c.to_dict() for c in checks],
        "notes": [
            "the squared-step factor in the speed bound is evaluated at the "
            "local step count",
            "gradient noise variance is configured, not estimated; the "
            "gradient-norm bound is the observed running maximum",
        ],
    }
    if extra:
        report.update(extra)
    return report
