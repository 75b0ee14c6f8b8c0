"""Client-side training: mini-batch SGD from a received global model.

Two step-counting conventions, both explicit in the federation config:
``steps`` runs exactly E gradient steps per round (the convention the
convergence analysis indexes by), ``epochs`` runs E passes over the local
data in contiguous mini-batches after a seeded shuffle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .objectives import ClassifierObjective, MlpModel, QuadraticObjective, SoftmaxModel

LOSS_LIMIT = 1e12


@dataclass(frozen=True)
class InverseTimeSchedule:
    """eta_t = 1 / (mu (t + gamma)), indexed by the global step counter.

    With gamma = 4L/mu the first rate is exactly 1/(4L), the largest rate
    the distance-recursion analysis permits.
    """

    mu: float
    gamma: float

    def __post_init__(self):
        if self.mu <= 0 or self.gamma <= 0:
            raise ValueError("mu and gamma must be positive")

    @classmethod
    def for_constants(cls, mu: float, ell: float) -> "InverseTimeSchedule":
        return cls(mu=mu, gamma=4.0 * ell / mu)

    def rate(self, step: int, round_index: int) -> float:
        return 1.0 / (self.mu * (step + self.gamma))


@dataclass(frozen=True)
class GeometricSchedule:
    """eta_r = eta0 * decay^r, constant within a communication round."""

    eta0: float
    decay: float

    def __post_init__(self):
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")

    def rate(self, step: int, round_index: int) -> float:
        return self.eta0 * self.decay**round_index


LrSchedule = InverseTimeSchedule | GeometricSchedule


class DivergenceError(RuntimeError):
    """Local run crossed the loss/parameter trust region."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"divergence at local step {step}: {detail}")
        self.step = step


@dataclass
class LocalRunRecord:
    w_end: np.ndarray
    grad_norm_max: float  # max ||g|| over the run's steps
    steps_taken: int
    end_loss: float
    iterates: Optional[np.ndarray] = None  # (steps+1, dim) when retained
    grads: Optional[np.ndarray] = None  # (steps, dim) when retained


def _epoch_orders(n: int, epochs: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([rng.permutation(n) for _ in range(epochs)])


def client_update(
    obj,
    w_start: np.ndarray,
    sched: LrSchedule,
    epochs: int,
    batch_size: int,
    t0: int,
    rng: np.random.Generator,
    round_index: int = 0,
    unit: str = "steps",
    retain_trajectory: bool = False,
) -> LocalRunRecord:
    """Run one round of local SGD and return the end state.

    ``t0`` is the global step counter at round start; rates are drawn from
    the schedule at steps t0, t0+1, ... (inverse-time) or at ``round_index``
    (geometric).  Deterministic for a fixed rng state.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    w_start = np.asarray(w_start, dtype=np.float64)

    if isinstance(obj, QuadraticObjective):
        # Theory track: E steps, full gradient plus pregenerated noise.
        n_steps = epochs
        rates = np.array(
            [sched.rate(t0 + s, round_index) for s in range(n_steps)]
        )
        noise = (
            obj.noise_std * rng.standard_normal((n_steps, obj.dim))
            if obj.noise_std > 0
            else np.zeros((n_steps, obj.dim))
        )
        iterates = np.empty((n_steps + 1, obj.dim))
        grads = np.empty((n_steps, obj.dim))
        gmax_sq, bad = kernels.quadratic_sgd(
            obj.A, obj.b, w_start, rates, noise, iterates, grads
        )
        if bad >= 0:
            raise DivergenceError(bad, "parameter out of range")
        w_end = iterates[-1].copy()
        end_loss = obj.loss(w_end)
        if not np.isfinite(end_loss) or end_loss > LOSS_LIMIT:
            raise DivergenceError(n_steps - 1, f"loss {end_loss!r} out of range")
        return LocalRunRecord(
            w_end=w_end,
            grad_norm_max=float(np.sqrt(gmax_sq)),
            steps_taken=n_steps,
            end_loss=end_loss,
            iterates=iterates if retain_trajectory else None,
            grads=grads if retain_trajectory else None,
        )

    if not isinstance(obj, ClassifierObjective):
        raise TypeError(f"unsupported objective type {type(obj).__name__}")
    if unit not in ("steps", "epochs"):
        raise ValueError(f"unknown local unit {unit!r}")

    n = obj.n_samples
    steps_per_epoch = -(-n // batch_size)
    if unit == "steps":
        # E single steps, each over a fresh shuffled slice of one batch.
        orders = np.ascontiguousarray(
            _epoch_orders(n, epochs, rng)[:, : min(batch_size, n)]
        )
        n_epochs, per_epoch = epochs, 1
        eff_batch = min(batch_size, n)
    else:
        orders = _epoch_orders(n, epochs, rng)
        n_epochs, per_epoch = epochs, steps_per_epoch
        eff_batch = batch_size
    n_steps = n_epochs * per_epoch
    rates = np.array([sched.rate(t0 + s, round_index) for s in range(n_steps)])

    model = obj.model
    if isinstance(model, SoftmaxModel):
        W, b = (a.copy() for a in model.unpack(w_start))
        gmax_sq, bad = kernels.softmax_sgd(
            obj.features, obj.labels, W, b, orders, rates, eff_batch
        )
        w_end = model.pack(W, b)
    elif isinstance(model, MlpModel):
        W1, b1, W2, b2 = (a.copy() for a in model.unpack(w_start))
        gmax_sq, bad = kernels.mlp_sgd(
            obj.features, obj.labels, W1, b1, W2, b2, orders, rates, eff_batch
        )
        w_end = model.pack(W1, b1, W2, b2)
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")
    if bad >= 0:
        raise DivergenceError(bad, "parameter out of range")
    end_loss = obj.loss(w_end)
    if not np.isfinite(end_loss) or end_loss > LOSS_LIMIT:
        raise DivergenceError(n_steps - 1, f"loss {end_loss!r} out of range")
    return LocalRunRecord(
        w_end=w_end,
        grad_norm_max=float(np.sqrt(gmax_sq)),
        steps_taken=n_steps,
        end_loss=end_loss,
    )
