"""Client loss functions.

Two families:

* :class:`QuadraticObjective` — exact oracles for the theory track.  Loss,
  gradient, optimum, and curvature constants are all closed-form, and
  stochastic gradients add Gaussian noise of known per-coordinate standard
  deviation, so the bounded-estimator constant is an input rather than an
  estimate.
* :class:`ClassifierObjective` — empirical mean cross-entropy of a linear
  softmax model or a one-hidden-layer ReLU MLP over a client's local
  samples, for the classification track.

Objectives are immutable after construction and safe to evaluate from any
number of workers; all randomness comes from caller-supplied generators.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SINGULAR_CONDITION = 1e12


def _check_dim(expected: int, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != expected:
        raise ValueError(
            f"parameter vector has dim {w.shape[0] if w.ndim == 1 else w.shape}, "
            f"objective expects dim {expected}"
        )
    return w


@dataclass
class QuadraticObjective:
    """F(w) = 0.5 w'Aw - b'w + c with A symmetric positive-definite.

    ``noise_std`` is the per-coordinate standard deviation of the Gaussian
    noise added by :meth:`grad_minibatch`; the bounded-estimator constant
    E||g - grad F||^2 is then exactly ``dim * noise_std**2``.
    """

    A: np.ndarray
    b: np.ndarray
    c: float = 0.0
    noise_std: float = 0.0
    _mu: float = field(init=False, repr=False)
    _ell: float = field(init=False, repr=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise ValueError(f"A must be square, got shape {self.A.shape}")
        if self.b.shape != (self.A.shape[0],):
            raise ValueError(
                f"b has dim {self.b.shape}, A is {self.A.shape[0]}x{self.A.shape[0]}"
            )
        scale = max(np.abs(self.A).max(), 1.0)
        if np.abs(self.A - self.A.T).max() > 1e-12 * scale:
            raise ValueError("A is not symmetric within 1e-12 relative tolerance")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        eigs = np.linalg.eigvalsh(self.A)
        if eigs[0] <= 0:
            raise ValueError(f"A is not positive-definite (min eigenvalue {eigs[0]})")
        self._mu = float(eigs[0])
        self._ell = float(eigs[-1])

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def f_star(self) -> float:
        return self.optimum()[1]

    def loss(self, w: np.ndarray) -> float:
        w = _check_dim(self.dim, w)
        return float(0.5 * w @ self.A @ w - self.b @ w + self.c)

    def grad(self, w: np.ndarray) -> np.ndarray:
        w = _check_dim(self.dim, w)
        return self.A @ w - self.b

    def grad_minibatch(
        self,
        w: np.ndarray,
        batch: Sequence[int] | None = None,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Exact gradient plus N(0, noise_std^2 I) noise; batch is ignored."""
        if batch is not None and len(batch) == 0:
            raise ValueError("batch must be nonempty")
        g = self.grad(w)
        if self.noise_std > 0:
            if rng is None:
                raise ValueError("noise_std > 0 requires an rng")
            g = g + self.noise_std * rng.standard_normal(self.dim)
        return g

    def optimum(self) -> tuple[np.ndarray, float]:
        """(w*, F*) with A w* = b; rejects numerically singular systems."""
        cond = self._ell / self._mu
        if cond > SINGULAR_CONDITION:
            raise ValueError(f"condition estimate {cond:.3e} exceeds 1e12")
        w_star = np.linalg.solve(self.A, self.b)
        residual = np.linalg.norm(self.A @ w_star - self.b)
        if residual > 1e-10 * max(np.linalg.norm(self.b), 1e-300):
            raise ArithmeticError(f"optimum residual {residual:.3e} out of tolerance")
        return w_star, self.loss(w_star)

    def smoothness_constants(self) -> tuple[float, float]:
        """(mu, L): extreme eigenvalues of A."""
        return self._mu, self._ell

    def gradient_noise_sq(self) -> float:
        """E||g - grad F||^2 of the stochastic gradient, known by construction."""
        return self.dim * self.noise_std**2


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@dataclass(frozen=True)
class SoftmaxModel:
    """Linear softmax classifier; parameters packed as [W.ravel(), b]."""

    n_features: int
    n_classes: int

    @property
    def n_params(self) -> int:
        return self.n_features * self.n_classes + self.n_classes

    def unpack(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d, k = self.n_features, self.n_classes
        return w[: d * k].reshape(d, k), w[d * k :]

    def pack(self, W: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.concatenate([W.ravel(), b])

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        bound = 1.0 / np.sqrt(self.n_features)
        return rng.uniform(-bound, bound, self.n_params)

    def logits(self, w: np.ndarray, X: np.ndarray) -> np.ndarray:
        W, b = self.unpack(w)
        return X @ W + b

    def loss(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        lp = _log_softmax(self.logits(w, X))
        return float(-lp[np.arange(X.shape[0]), y].mean())

    def grad(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        W, b = self.unpack(w)
        probs = np.exp(_log_softmax(X @ W + b))
        probs[np.arange(X.shape[0]), y] -= 1.0
        probs /= X.shape[0]
        return self.pack(X.T @ probs, probs.sum(axis=0))


@dataclass(frozen=True)
class MlpModel:
    """One-hidden-layer ReLU MLP; parameters packed as [W1, b1, W2, b2]."""

    n_features: int
    n_classes: int
    hidden: int = 32

    @property
    def n_params(self) -> int:
        d, h, k = self.n_features, self.hidden, self.n_classes
        return d * h + h + h * k + k

    def unpack(self, w: np.ndarray):
        d, h, k = self.n_features, self.hidden, self.n_classes
        o = 0
        W1 = w[o : o + d * h].reshape(d, h)
        o += d * h
        b1 = w[o : o + h]
        o += h
        W2 = w[o : o + h * k].reshape(h, k)
        o += h * k
        return W1, b1, W2, w[o : o + k]

    def pack(self, W1, b1, W2, b2) -> np.ndarray:
        return np.concatenate([W1.ravel(), b1, W2.ravel(), b2])

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        # Uniform +-1/sqrt(fan_in) per layer, biases included.
        d, h, k = self.n_features, self.hidden, self.n_classes
        bound1 = 1.0 / np.sqrt(d)
        bound2 = 1.0 / np.sqrt(h)
        return np.concatenate(
            [
                rng.uniform(-bound1, bound1, d * h + h),
                rng.uniform(-bound2, bound2, h * k + k),
            ]
        )

    def logits(self, w: np.ndarray, X: np.ndarray) -> np.ndarray:
        W1, b1, W2, b2 = self.unpack(w)
        return np.maximum(X @ W1 + b1, 0.0) @ W2 + b2

    def loss(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        lp = _log_softmax(self.logits(w, X))
        return float(-lp[np.arange(X.shape[0]), y].mean())

    def grad(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        W1, b1, W2, b2 = self.unpack(w)
        n = X.shape[0]
        Z = X @ W1 + b1
        H = np.maximum(Z, 0.0)
        probs = np.exp(_log_softmax(H @ W2 + b2))
        probs[np.arange(n), y] -= 1.0
        probs /= n
        dH = probs @ W2.T
        dH[Z <= 0.0] = 0.0
        return self.pack(X.T @ dH, dH.sum(axis=0), H.T @ probs, probs.sum(axis=0))


@dataclass
class ClassifierObjective:
    """Mean cross-entropy of ``model`` over one client's local samples.

    The optimum value is taken as 0, the cross-entropy lower bound, so the
    loss gap F(w) - F* equals the loss itself.
    """

    model: SoftmaxModel | MlpModel
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D sample matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must have one entry per sample")
        if self.features.shape[1] != self.model.n_features:
            raise ValueError(
                f"features have {self.features.shape[1]} columns, "
                f"model expects {self.model.n_features}"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.model.n_classes:
            raise ValueError("labels outside [0, n_classes)")

    @property
    def dim(self) -> int:
        return self.model.n_params

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def f_star(self) -> float:
        return 0.0

    def loss(self, w: np.ndarray) -> float:
        w = _check_dim(self.dim, w)
        return self.model.loss(w, self.features, self.labels)

    def grad(self, w: np.ndarray) -> np.ndarray:
        w = _check_dim(self.dim, w)
        return self.model.grad(w, self.features, self.labels)

    def grad_minibatch(
        self,
        w: np.ndarray,
        batch: Sequence[int],
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        w = _check_dim(self.dim, w)
        batch = np.asarray(batch, dtype=np.int64)
        if batch.size == 0:
            raise ValueError("batch must be nonempty")
        if batch.min() < 0 or batch.max() >= self.n_samples:
            raise ValueError("batch indices out of range")
        return self.model.grad(w, self.features[batch], self.labels[batch])


class MixtureObjective:
    """p-weighted average of classifier objectives (the global objective)."""

    def __init__(self, objectives, p):
        self.objectives = list(objectives)
        self.p = np.asarray(p, dtype=np.float64)
        self.dim = self.objectives[0].dim
        self.f_star = 0.0

    def loss(self, w: np.ndarray) -> float:
        return float(sum(pi * o.loss(w) for pi, o in zip(self.p, self.objectives)))

    def grad(self, w: np.ndarray) -> np.ndarray:
        g = np.zeros(self.dim)
        for pi, o in zip(self.p, self.objectives):
            g += pi * o.grad(w)
        return g


def _check_weights(p, n: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (n,):
        raise ValueError(f"expected {n} weights, got shape {p.shape}")
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative and sum to 1")
    return p


def make_quadratic_clients(
    n_clients: int,
    dim: int,
    mu: float,
    ell: float,
    offset_scale: float,
    noise_std: float,
    seed: int,
    identical: bool = False,
) -> list[QuadraticObjective]:
    """Random quadratic clients with exactly known curvature constants.

    Every client gets the spectrum linspace(mu, ell, dim) under its own
    Haar-random rotation, so per-client (mu, L) are exact inputs; the
    linear offsets (scaled by ``offset_scale``) drive heterogeneity.
    With ``identical=True`` all clients share one draw (zero heterogeneity).
    """
    if not 0 < mu <= ell:
        raise ValueError("need 0 < mu <= ell")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4, 10)))
    spectrum = np.linspace(mu, ell, dim) if dim > 1 else np.array([mu])
    clients = []
    for _ in range(1 if identical else n_clients):
        raw = rng.standard_normal((dim, dim))
        q, r = np.linalg.qr(raw)
        q *= np.sign(np.diag(r))
        A = (q * spectrum) @ q.T
        A = 0.5 * (A + A.T)
        b = offset_scale * rng.standard_normal(dim)
        clients.append(QuadraticObjective(A, b, 0.0, noise_std=noise_std))
    if identical:
        clients = clients * n_clients
    return clients


def global_objective(objectives, p):
    """The p-weighted global objective.

    Quadratic clients combine in closed form (sum of the A, b, c pieces),
    exposing their own optimum; classifier clients combine as a lazy
    weighted mixture.  Mixing the two kinds is rejected.
    """
    if not objectives:
        raise ValueError("need at least one client objective")
    p = _check_weights(p, len(objectives))
    dims = {o.dim for o in objectives}
    if len(dims) != 1:
        raise ValueError(f"client objectives disagree on dim: {sorted(dims)}")
    kinds = {type(o) for o in objectives}
    if kinds == {QuadraticObjective}:
        A = sum(pi * o.A for pi, o in zip(p, objectives))
        b = sum(pi * o.b for pi, o in zip(p, objectives))
        c = sum(pi * o.c for pi, o in zip(p, objectives))
        return QuadraticObjective(A, b, float(c))
    if kinds == {ClassifierObjective}:
        return MixtureObjective(objectives, p)
    raise ValueError(f"cannot mix objective kinds: {sorted(k.__name__ for k in kinds)}")
