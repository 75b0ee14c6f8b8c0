"""The federated round loop: sample, broadcast, local update, aggregate.

Runs are reproducible down to the bit for a fixed config: every random
stream is derived from (seed, purpose, client, round), so neither the
worker count nor scheduling order can change a result.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng as rng_mod
from .diagnostics import weighting_skew
from .local_update import DivergenceError, LrSchedule, client_update
from .metrics import accuracy
from .objectives import ClassifierObjective, QuadraticObjective, global_objective
from .strategies import RoundContext, Strategy, aggregate, parse_strategy

TRACKS = ("theory-quadratic", "classification")
LOSS_EVAL_MODES = ("global_at_round_start", "local_at_round_end")


@dataclass(frozen=True)
class FedConfig:
    """Inputs of one experiment; hashable/echoable, no derived state."""

    n_clients: int
    rounds: int
    schedule: LrSchedule
    strategy: str
    seed: int
    participation: float = 1.0
    local_epochs: int = 1
    batch_size: int = 64
    loss_eval: str = "global_at_round_start"
    track: str = "classification"
    local_unit: Optional[str] = None  # defaults: steps (theory) / epochs (classif.)
    retain_trajectories: bool = False
    record_models: bool = False

    def __post_init__(self):
        if self.n_clients < 1 or self.rounds < 1:
            raise ValueError("n_clients and rounds must be positive")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must be in (0, 1]")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be positive")
        if self.track not in TRACKS:
            raise ValueError(f"track must be one of {TRACKS}")
        if self.loss_eval not in LOSS_EVAL_MODES:
            raise ValueError(f"loss_eval must be one of {LOSS_EVAL_MODES}")
        if self.local_unit not in (None, "steps", "epochs"):
            raise ValueError("local_unit must be 'steps' or 'epochs'")
        if self.track == "theory-quadratic" and self.local_unit == "epochs":
            raise ValueError("the quadratic track counts local work in steps")

    @property
    def unit(self) -> str:
        if self.local_unit is not None:
            return self.local_unit
        return "steps" if self.track == "theory-quadratic" else "epochs"

    def with_seed(self, seed: int) -> "FedConfig":
        return dataclasses.replace(self, seed=seed)


@dataclass
class FederatedProblem:
    """Client objectives plus the shared pieces of one experiment."""

    objectives: list
    p: np.ndarray
    w0: np.ndarray
    test_features: Optional[np.ndarray] = None
    test_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.w0 = np.asarray(self.w0, dtype=np.float64)
        dims = {o.dim for o in self.objectives}
        if len(dims) != 1 or self.w0.shape != (dims.pop(),):
            raise ValueError("objectives and w0 disagree on dimension")
        if self.p.shape != (len(self.objectives),):
            raise ValueError("one weight per client required")
        if (self.p <= 0).any() or abs(self.p.sum() - 1.0) > 1e-9:
            raise ValueError("p must be positive and sum to 1")

    @property
    def dim(self) -> int:
        return self.w0.shape[0]

    def is_quadratic(self) -> bool:
        return isinstance(self.objectives[0], QuadraticObjective)


@dataclass
class RoundRecord:
    round_index: int
    t_step: int
    selected: np.ndarray
    alpha: np.ndarray
    p_selected: np.ndarray
    global_loss: float
    accuracy: Optional[float]
    rho_wt: Optional[float]
    rho_wstar: Optional[float]

    @property
    def alpha_min(self) -> float:
        return float(self.alpha.min())

    @property
    def alpha_max(self) -> float:
        return float(self.alpha.max())

    @property
    def alpha_entropy(self) -> float:
        pos = self.alpha[self.alpha > 0]
        return float(-(pos * np.log(pos)).sum())

    @property
    def selected_count(self) -> int:
        return int(self.selected.size)


@dataclass
class ExperimentResult:
    config: FedConfig
    records: list[RoundRecord]
    final_model: np.ndarray
    grad_norm_max: float
    diverged: bool = False
    divergence: Optional[dict] = None
    global_models: Optional[np.ndarray] = None  # (rounds+1, dim) when recorded
    trajectories: Optional[list[np.ndarray]] = None  # per round (m, steps+1, dim)
    trajectory_grads: Optional[list[np.ndarray]] = None  # per round (m, steps, dim)
    rng_provenance: dict = field(default_factory=dict)


def sample_clients(rng: np.random.Generator, n_clients: int, participation: float) -> np.ndarray:
    """Uniform m-subset without replacement, m = max(round(C*N), 1), ascending."""
    m = max(int(np.floor(participation * n_clients + 0.5)), 1)
    return np.sort(rng.choice(n_clients, size=m, replace=False))


def _steps_per_round(config: FedConfig, problem: FederatedProblem) -> int:
    if config.unit == "steps":
        return config.local_epochs
    n_max = max(o.n_samples for o in problem.objectives)
    return config.local_epochs * (-(-n_max // config.batch_size))


def run_federated(
    config: FedConfig,
    problem: FederatedProblem,
    workers: int = 1,
) -> ExperimentResult:
    """Execute the round loop and return per-round records.

    Client updates within a round run on up to ``workers`` threads; results
    are keyed by client id, so any worker count yields the same output.
    A diverging client halts the experiment with the partial records kept.
    """
    strategy = parse_strategy(config.strategy) if isinstance(config.strategy, str) else config.strategy
    if len(problem.objectives) != config.n_clients:
        raise ValueError(
            f"config says {config.n_clients} clients, problem has {len(problem.objectives)}"
        )
    quadratic = problem.is_quadratic()
    glob = global_objective(problem.objectives, problem.p)
    f_star = np.array([o.f_star for o in problem.objectives])
    gap_at_opt = None
    if quadratic:
        w_star, _ = glob.optimum()
        gap_at_opt = np.array([o.loss(w_star) - fs for o, fs in zip(problem.objectives, f_star)])

    noise_purpose = rng_mod.NOISE if quadratic else rng_mod.BATCH
    retain = config.retain_trajectories
    record_models = config.record_models or retain
    spr = _steps_per_round(config, problem)

    w_global = problem.w0.copy()
    records: list[RoundRecord] = []
    accuracy_history: list[float] = []
    global_models = [w_global.copy()] if record_models else None
    trajectories: list[np.ndarray] = [] if retain else None
    trajectory_grads: list[np.ndarray] = [] if retain else None
    grad_norm_max = 0.0
    diverged = False
    divergence = None

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for r in range(config.rounds):
            t0 = r * spr
            selected = sample_clients(
                rng_mod.stream(config.seed, rng_mod.SAMPLING, 0, r),
                config.n_clients,
                config.participation,
            )
            p_sel = problem.p[selected]
            p_sel = p_sel / p_sel.sum()

            def update_one(cid: int):
                return client_update(
                    problem.objectives[cid],
                    w_global,
                    config.schedule,
                    config.local_epochs,
                    config.batch_size,
                    t0,
                    rng_mod.stream(config.seed, noise_purpose, int(cid), r),
                    round_index=r,
                    unit=config.unit,
                    retain_trajectory=retain,
                )

            try:
                if pool is not None:
                    locals_ = list(pool.map(update_one, selected))
                else:
                    locals_ = [update_one(cid) for cid in selected]
            except DivergenceError as exc:
                diverged = True
                divergence = {"round": r, "step": exc.step, "detail": str(exc)}
                break

            grad_norm_max = max(grad_norm_max, max(l.grad_norm_max for l in locals_))
            local_models = np.stack([l.w_end for l in locals_])
            if retain:
                trajectories.append(np.stack([l.iterates for l in locals_]))
                trajectory_grads.append(np.stack([l.grads for l in locals_]))

            start_losses = np.array(
                [problem.objectives[c].loss(w_global) for c in selected]
            )
            if config.loss_eval == "global_at_round_start":
                eval_losses = start_losses
            else:
                eval_losses = np.array([l.end_loss for l in locals_])

            ctx = RoundContext(
                round_index=r,
                client_ids=selected,
                p=p_sel,
                local_models=local_models,
                eval_losses=eval_losses,
                f_star=f_star[selected],
                accuracy_history=tuple(accuracy_history),
                global_model_prev=w_global,
            )
            alpha = strategy.coefficients(ctx)
            w_global = aggregate(ctx, alpha)
            if record_models:
                global_models.append(w_global.copy())

            start_gaps = start_losses - f_star[selected]
            rho_wt = weighting_skew(
                alpha, start_gaps, float(p_sel @ start_losses), float(p_sel @ f_star[selected])
            )
            rho_wstar = None
            if quadratic:
                gs = gap_at_opt[selected]
                rho_wstar = weighting_skew(alpha, gs, float(p_sel @ gs), 0.0)

            acc = None
            if problem.test_features is not None and not quadratic:
                model = problem.objectives[0].model
                acc = accuracy(
                    model.logits(w_global, problem.test_features), problem.test_labels
                )
                accuracy_history.append(acc)

            records.append(
                RoundRecord(
                    round_index=r,
                    t_step=t0,
                    selected=selected,
                    alpha=np.asarray(alpha, dtype=np.float64),
                    p_selected=p_sel,
                    global_loss=glob.loss(w_global),
                    accuracy=acc,
                    rho_wt=rho_wt,
                    rho_wstar=rho_wstar,
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()

    return ExperimentResult(
        config=config,
        records=records,
        final_model=w_global,
        grad_norm_max=grad_norm_max,
        diverged=diverged,
        divergence=divergence,
        global_models=np.stack(global_models) if global_models is not None else None,
        trajectories=trajectories,
        trajectory_grads=trajectory_grads,
        rng_provenance={
            "root_seed": config.seed,
            "scheme": "seed-sequence spawn keys (purpose, client, round)",
        },
    )


def run_repeated(
    config: FedConfig,
    problem: FederatedProblem,
    seeds: Sequence[int],
    workers: int = 1,
) -> list[ExperimentResult]:
    """One independent run per seed; the Monte-Carlo expectation sample."""
    return [run_federated(config.with_seed(int(s)), problem, workers) for s in seeds]


def virtual_iterate(
    result: ExperimentResult, problem: FederatedProblem
) -> np.ndarray:
    """Reconstruct the analysis-only mean iterate inside each round.

    Segment r starts at the served global model and applies the p-weighted
    client gradients step by step; shape (rounds, steps+1, dim).  Requires
    full participation and retained trajectories.
    """
    if result.trajectory_grads is None or result.global_models is None:
        raise ValueError("run was executed without retained trajectories")
    config = result.config
    if config.participation < 1.0:
        raise ValueError("virtual iterate requires full participation")
    steps = config.local_epochs
    n_rounds = len(result.records)
    out = np.empty((n_rounds, steps + 1, problem.dim))
    for r in range(n_rounds):
        p_sel = result.records[r].p_selected
        grads = result.trajectory_grads[r]  # (m, steps, dim)
        t0 = result.records[r].t_step
        v = result.global_models[r].copy()
        out[r, 0] = v
        for s in range(steps):
            eta = config.schedule.rate(t0 + s, r)
            v = v - eta * (p_sel @ grads[:, s, :])
            out[r, s + 1] = v
    return out
