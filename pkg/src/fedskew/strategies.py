"""Aggregation coefficient rules and the aggregation barrier.

Every rule maps a :class:`RoundContext` to coefficients on the probability
simplex.  The gap-driven family weights clients by F_i - F_i*: one-hot on
the largest gap (fedworse) or smallest (fedbetter), their top-k variants,
and exponentially tilted soft versions with temperature T.  Hybrids either
switch rules at a trigger (discrete) or mix two rules with a ramp
(annealed).

Rules are pure functions of the context; hybrid phase latching is derived
from the context history, so repeated evaluation is side-effect free.

String specs (see also the CLI help)::

    strategy  := discrete | anneal | atom
    atom      := name [ '(' key=value, ... ')' ]
    discrete  := 'discrete[' atom '@' trigger ' -> ' ... ' -> ' atom ']'
    trigger   := 'round<' INT | 'acc>=' FLOAT | 'always'
    anneal    := 'anneal[' atom ' -> ' atom '; lambda=' ramp ']'
    ramp      := 'linear(' start ',' end ',' rounds ')' | 'const(' value ')'

Examples: ``fedsoftworse(T=0.2)``,
``discrete[fedsoftbetter(T=0.2)@round<20 -> fedavg]``,
``anneal[fedworse -> fedavg; lambda=linear(0,1,100)]``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

SIMPLEX_TOL = 1e-12


@dataclass
class RoundContext:
    """Everything a rule may read at an aggregation barrier."""

    round_index: int
    client_ids: np.ndarray  # selected client ids, ascending
    p: np.ndarray  # weights restricted to the selected set, sum 1
    local_models: np.ndarray  # (m, dim) end-of-round local models
    eval_losses: np.ndarray  # F_i at the configured evaluation point
    f_star: np.ndarray  # per-client optimum values
    accuracy_history: Sequence[float] = ()
    global_model_prev: np.ndarray | None = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.eval_losses = np.asarray(self.eval_losses, dtype=np.float64)
        self.f_star = np.asarray(self.f_star, dtype=np.float64)
        if (self.p <= 0).any() or abs(self.p.sum() - 1.0) > 1e-9:
            raise ValueError("p must be positive and renormalized over the selection")
        if not np.isfinite(self.eval_losses).all():
            raise ValueError("eval_losses must be finite")

    @property
    def gaps(self) -> np.ndarray:
        return self.eval_losses - self.f_star

    @property
    def n_selected(self) -> int:
        return self.p.shape[0]


def _simplex(alpha: np.ndarray) -> np.ndarray:
    total = alpha.sum()
    if not np.isfinite(total) or total <= 0:
        raise ValueError("degenerate coefficient vector")
    return alpha / total


def fedavg(ctx: RoundContext) -> np.ndarray:
    """alpha = p."""
    return ctx.p.copy()


def fedworse(ctx: RoundContext) -> np.ndarray:
    """One-hot on the client with the largest loss gap; ties to lowest id."""
    alpha = np.zeros(ctx.n_selected)
    alpha[int(np.argmax(ctx.gaps))] = 1.0
    return alpha


def fedbetter(ctx: RoundContext) -> np.ndarray:
    """One-hot on the client with the smallest loss gap; ties to lowest id."""
    alpha = np.zeros(ctx.n_selected)
    alpha[int(np.argmin(ctx.gaps))] = 1.0
    return alpha


def _top_fraction(ctx: RoundContext, k: float, largest: bool) -> np.ndarray:
    if not 0 < k <= 1:
        raise ValueError(f"fraction k must be in (0, 1], got {k}")
    m = ctx.n_selected
    take = max(1, int(np.floor(k * m + 0.5)))
    key = -ctx.gaps if largest else ctx.gaps
    order = np.lexsort((np.arange(m), key))[:take]
    alpha = np.zeros(m)
    alpha[order] = ctx.p[order]
    return _simplex(alpha)


def fedworse_k(ctx: RoundContext, k: float) -> np.ndarray:
    """p renormalized over the round(k*m) largest-gap clients."""
    return _top_fraction(ctx, k, largest=True)


def fedbetter_k(ctx: RoundContext, k: float) -> np.ndarray:
    """p renormalized over the round(k*m) smallest-gap clients."""
    return _top_fraction(ctx, k, largest=False)


def _soft(ctx: RoundContext, temperature: float, sign: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    scaled = sign * ctx.gaps / temperature
    # Shift by the max exponent: exactly invariant, overflow-safe.
    return _simplex(ctx.p * np.exp(scaled - scaled.max()))


def fedsoftworse(ctx: RoundContext, temperature: float = 0.2) -> np.ndarray:
    """alpha_i proportional to p_i exp(+gap_i / T)."""
    return _soft(ctx, temperature, +1.0)


def fedsoftbetter(ctx: RoundContext, temperature: float = 0.2) -> np.ndarray:
    """alpha_i proportional to p_i exp(-gap_i / T)."""
    return _soft(ctx, temperature, -1.0)


@dataclass(frozen=True)
class RoundTrigger:
    """Fires once the round index reaches ``limit`` (phase active while r < limit)."""

    limit: int

    def fired(self, ctx: RoundContext) -> bool:
        return ctx.round_index >= self.limit


@dataclass(frozen=True)
class AccuracyTrigger:
    """Fires once any recorded global accuracy reaches ``threshold``."""

    threshold: float

    def fired(self, ctx: RoundContext) -> bool:
        return any(a >= self.threshold for a in ctx.accuracy_history)


@dataclass(frozen=True)
class AlwaysActive:
    def fired(self, ctx: RoundContext) -> bool:
        return False


def hybrid_discrete(ctx: RoundContext, phases) -> np.ndarray:
    """Delegate to the first phase whose trigger has not yet fired.

    Triggers latch (round indices only grow; accuracy triggers scan the
    whole history), so once a later phase activates, earlier phases never
    reactivate.  If every trigger has fired, the last phase applies.
    """
    if not phases:
        raise ValueError("discrete hybrid needs at least one phase")
    for rule, trigger in phases:
        if not trigger.fired(ctx):
            return rule(ctx)
    return phases[-1][0](ctx)


def hybrid_annealed(ctx: RoundContext, base, target, lambda_schedule) -> np.ndarray:
    """alpha = (1 - lambda_r) base(ctx) + lambda_r target(ctx)."""
    lam = float(lambda_schedule(ctx.round_index))
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda schedule produced {lam}, outside [0, 1]")
    return (1.0 - lam) * base(ctx) + lam * target(ctx)


@dataclass(frozen=True)
class LinearRamp:
    """start -> end over ``rounds`` rounds, clamped and non-decreasing."""

    start: float
    end: float
    rounds: int

    def __post_init__(self):
        if not (0 <= self.start <= 1 and 0 <= self.end <= 1):
            raise ValueError("ramp endpoints must be in [0, 1]")
        if self.end < self.start:
            raise ValueError("ramp must be non-decreasing")
        if self.rounds < 1:
            raise ValueError("ramp length must be >= 1")

    def __call__(self, round_index: int) -> float:
        frac = min(1.0, max(0.0, round_index / self.rounds))
        return self.start + (self.end - self.start) * frac


@dataclass(frozen=True)
class ConstantRamp:
    value: float

    def __post_init__(self):
        if not 0 <= self.value <= 1:
            raise ValueError("constant lambda must be in [0, 1]")

    def __call__(self, round_index: int) -> float:
        return self.value


def aggregate(ctx: RoundContext, alpha: np.ndarray) -> np.ndarray:
    """Coordinate-wise convex combination of the local models."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (ctx.n_selected,):
        raise ValueError(
            f"{alpha.shape[0]} coefficients for {ctx.n_selected} selected clients"
        )
    if (alpha < -SIMPLEX_TOL).any() or abs(alpha.sum() - 1.0) > 1e-9:
        raise ValueError("coefficients must be a probability vector")
    if ctx.local_models.shape[0] != ctx.n_selected:
        raise ValueError("local_models missing for some selected clients")
    return alpha @ ctx.local_models


@dataclass
class Strategy:
    """A named coefficient rule; ``name`` is the canonical spec string."""

    name: str
    fn: Callable[[RoundContext], np.ndarray]

    def coefficients(self, ctx: RoundContext) -> np.ndarray:
        return self.fn(ctx)


class StrategySpecError(ValueError):
    """Strategy string rejected; carries the parse position."""

    def __init__(self, text: str, pos: int, message: str):
        super().__init__(f"{message} at position {pos} in {text!r}")
        self.pos = pos


_DEFAULT_SWITCH = 20  # round at which the named two-phase hybrids change rule
_NUM = r"[-+]?\d+(?:\.\d*)?(?:[eE][-+]?\d+)?"


def _parse_kwargs(text: str, inner: str, offset: int) -> dict[str, float]:
    kwargs: dict[str, float] = {}
    if not inner.strip():
        return kwargs
    for part in inner.split(","):
        m = re.fullmatch(rf"\s*([A-Za-z_]\w*)\s*=\s*({_NUM})\s*", part)
        if not m:
            raise StrategySpecError(text, offset, f"bad parameter {part.strip()!r}")
        kwargs[m.group(1)] = float(m.group(2))
    return kwargs


def _pop(kwargs: dict, key: str, default):
    return kwargs.pop(key, default)


def _build_atom(text: str, atom: str, offset: int) -> Callable:
    m = re.fullmatch(r"\s*([A-Za-z_]\w*)\s*(?:\((.*)\))?\s*", atom, re.DOTALL)
    if not m:
        raise StrategySpecError(text, offset, f"cannot parse strategy {atom.strip()!r}")
    name = m.group(1).lower()
    kwargs = _parse_kwargs(text, m.group(2) or "", offset)

    def done():
        if kwargs:
            raise StrategySpecError(
                text, offset, f"unknown parameter(s) {sorted(kwargs)} for {name!r}"
            )

    if name == "fedavg":
        done()
        return fedavg
    if name in ("fedworse", "fedbetter"):
        k = _pop(kwargs, "k", None)
        done()
        pick = fedworse_k if name == "fedworse" else fedbetter_k
        plain = fedworse if name == "fedworse" else fedbetter
        if k is None:
            return plain
        return lambda ctx: pick(ctx, k)
    if name in ("fedsoftworse", "fedsoftbetter"):
        T = _pop(kwargs, "T", 0.2)
        done()
        soft = fedsoftworse if name == "fedsoftworse" else fedsoftbetter
        return lambda ctx: soft(ctx, T)
    if name in _ALIASES:
        return _ALIASES[name](text, offset, kwargs, done)
    raise StrategySpecError(text, offset, f"unknown strategy {name!r}")


def _two_phase(first: Callable, second: Callable, switch: int):
    phases = [(first, RoundTrigger(int(switch))), (second, AlwaysActive())]
    return lambda ctx: hybrid_discrete(ctx, phases)


def _alias_soft_then_avg(sign: str):
    def build(text, offset, kwargs, done):
        T = _pop(kwargs, "T", 0.2)
        switch = _pop(kwargs, "switch", _DEFAULT_SWITCH)
        done()
        soft = fedsoftworse if sign == "worse" else fedsoftbetter
        return _two_phase(lambda ctx: soft(ctx, T), fedavg, switch)

    return build


def _alias_avg_then_soft(sign: str):
    def build(text, offset, kwargs, done):
        T = _pop(kwargs, "T", 0.2)
        switch = _pop(kwargs, "switch", _DEFAULT_SWITCH)
        done()
        soft = fedsoftworse if sign == "worse" else fedsoftbetter
        return _two_phase(fedavg, lambda ctx: soft(ctx, T), switch)

    return build


def _alias_better_avg_worse(text, offset, kwargs, done):
    T = _pop(kwargs, "T", 0.2)
    s1 = int(_pop(kwargs, "switch", _DEFAULT_SWITCH))
    s2 = int(_pop(kwargs, "switch2", 2 * _DEFAULT_SWITCH))
    done()
    phases = [
        ((lambda ctx: fedsoftbetter(ctx, T)), RoundTrigger(s1)),
        (fedavg, RoundTrigger(s2)),
        ((lambda ctx: fedsoftworse(ctx, T)), AlwaysActive()),
    ]
    return lambda ctx: hybrid_discrete(ctx, phases)


_ALIASES = {
    # Naming convention: fedXavg = phase X then fedavg; fedavgX = the reverse.
    "fedsoftworseavg": _alias_soft_then_avg("worse"),
    "fedsoftbetteravg": _alias_soft_then_avg("better"),
    "fedavgsoftworse": _alias_avg_then_soft("worse"),
    "fedavgsoftbetter": _alias_avg_then_soft("better"),
    "fedsoftbetteravgsoftworse": _alias_better_avg_worse,
}


def _parse_trigger(text: str, frag: str, offset: int):
    frag = frag.strip()
    if frag == "always" or frag == "":
        return AlwaysActive()
    m = re.fullmatch(r"round\s*<\s*(\d+)", frag)
    if m:
        return RoundTrigger(int(m.group(1)))
    m = re.fullmatch(rf"acc\s*>=\s*({_NUM})", frag)
    if m:
        return AccuracyTrigger(float(m.group(1)))
    raise StrategySpecError(text, offset, f"cannot parse trigger {frag!r}")


def _parse_ramp(text: str, frag: str, offset: int):
    frag = frag.strip()
    m = re.fullmatch(rf"linear\(\s*({_NUM})\s*,\s*({_NUM})\s*,\s*(\d+)\s*\)", frag)
    if m:
        return LinearRamp(float(m.group(1)), float(m.group(2)), int(m.group(3)))
    m = re.fullmatch(rf"const\(\s*({_NUM})\s*\)", frag)
    if m:
        return ConstantRamp(float(m.group(1)))
    raise StrategySpecError(text, offset, f"cannot parse lambda schedule {frag!r}")


def _split_arrows(body: str):
    """Split on '->' outside parentheses, yielding (fragment, offset) pairs."""
    parts, depth, start, i = [], 0, 0, 0
    while i < len(body):
        ch = body[i]
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif ch == "-" and depth == 0 and body[i : i + 2] == "->":
            parts.append((body[start:i], start))
            i += 2
            start = i
            continue
        i += 1
    parts.append((body[start:], start))
    return parts


def parse_strategy(text: str) -> Strategy:
    """Parse a strategy spec string into a named coefficient rule."""
    if not isinstance(text, str) or not text.strip():
        raise StrategySpecError(str(text), 0, "empty strategy spec")
    canonical = re.sub(r"\s+", " ", text.strip())
    stripped = text.strip()
    lead = len(text) - len(text.lstrip())

    m = re.fullmatch(r"discrete\[(.*)\]", stripped, re.DOTALL)
    if m:
        body_off = lead + len("discrete[")
        phases = []
        for frag, off in _split_arrows(m.group(1)):
            if "@" in frag:
                atom_txt, trig_txt = frag.split("@", 1)
                trigger = _parse_trigger(
                    text, trig_txt, body_off + off + len(atom_txt) + 1
                )
            else:
                atom_txt, trigger = frag, AlwaysActive()
            rule = _build_atom(text, atom_txt, body_off + off)
            phases.append((rule, trigger))
        return Strategy(canonical, lambda ctx: hybrid_discrete(ctx, phases))

    m = re.fullmatch(r"anneal\[(.*)\]", stripped, re.DOTALL)
    if m:
        body_off = lead + len("anneal[")
        body = m.group(1)
        if ";" not in body:
            raise StrategySpecError(
                text, body_off + len(body), "anneal needs '; lambda=...'"
            )
        rules_txt, lam_txt = body.rsplit(";", 1)
        pairs = _split_arrows(rules_txt)
        if len(pairs) != 2:
            raise StrategySpecError(
                text, body_off, "anneal needs exactly 'base -> target'"
            )
        base = _build_atom(text, pairs[0][0], body_off + pairs[0][1])
        target = _build_atom(text, pairs[1][0], body_off + pairs[1][1])
        lam_off = body_off + len(rules_txt) + 1
        m2 = re.fullmatch(r"\s*lambda\s*=\s*(.*?)\s*", lam_txt, re.DOTALL)
        if not m2:
            raise StrategySpecError(text, lam_off, "expected lambda=...")
        ramp = _parse_ramp(text, m2.group(1), lam_off)
        return Strategy(
            canonical, lambda ctx: hybrid_annealed(ctx, base, target, ramp)
        )

    return Strategy(canonical, _build_atom(text, stripped, lead))
