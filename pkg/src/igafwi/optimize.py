"""Projected limited-memory BFGS with box bounds."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# The gradient may be returned as a zero-argument callable; it is then only
# invoked for accepted points, so rejected line-search trials cost a misfit only.
Evaluator = Callable[[np.ndarray], tuple[float, "np.ndarray | Callable[[], np.ndarray]"]]


def resolve_gradient(g) -> np.ndarray:
    return np.asarray(g() if callable(g) else g, dtype=float)


@dataclass
class OptimizerState:
    lower: np.ndarray
    upper: np.ndarray
    memory: int = 10
    max_iter: int = 10
    tol_grad: float = 1e-10
    tol_chi: float = 0.0
    armijo: float = 1e-4
    max_trials: int = 20
    k: int = 0
    n_evals: int = 0
    pairs: deque = field(default_factory=deque)

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        self.pairs = deque(self.pairs, maxlen=self.memory)

    @classmethod
    def for_bounds(cls, n: int, lo: float, hi: float, **kw) -> OptimizerState:
        return cls(lower=np.full(n, lo), upper=np.full(n, hi), **kw)


@dataclass
class StepResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    status: str  # "ok" or "no-progress"
    step_length: float
    trials: int


def projected_gradient(x, g, lower, upper) -> np.ndarray:
    return np.clip(x - g, lower, upper) - x


def _free(x, g, lower, upper):
    at_lo = (x <= lower) & (g > 0)
    at_hi = (x >= upper) & (g < 0)
    return ~(at_lo | at_hi)


def two_loop(g: np.ndarray, pairs) -> np.ndarray:
    """``H g`` for the limited-memory inverse Hessian built from ``pairs``."""
    q = g.copy()
    alphas = []
    for s, y in reversed(pairs):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    s, y = pairs[-1]
    q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def search_direction(state: OptimizerState, x, g) -> np.ndarray:
    free = _free(x, g, state.lower, state.upper)
    gf = np.where(free, g, 0.0)
    gmax = np.max(np.abs(gf)) if gf.size else 0.0
    if gmax == 0.0:
        return np.zeros_like(x)
    if state.pairs:
        d = -two_loop(gf, state.pairs)
        d[~free] = 0.0
        if d @ gf < 0:
            return d
        state.pairs.clear()
    return -gf / gmax


def step(state: OptimizerState, x, f: float, g, evaluator: Evaluator) -> StepResult:
    """One projected quasi-Newton iteration with Armijo backtracking."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient contains non-finite entries")
    d = search_direction(state, x, g)
    if not np.any(d):
        return StepResult(x, f, g, "no-progress", 0.0, 0)
    t = 1.0
    for trial in range(1, state.max_trials + 1):
        x_new = np.clip(x + t * d, state.lower, state.upper)
        f_new, g_new = evaluator(x_new)
        state.n_evals += 1
        if np.isfinite(f_new) and f_new <= f + state.armijo * (g @ (x_new - x)) and f_new <= f:
            g_new = resolve_gradient(g_new)
            s = x_new - x
            y = g_new - g
            if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
                state.pairs.append((s, y))
            state.k += 1
            return StepResult(x_new, float(f_new), g_new, "ok",
                              float(np.max(np.abs(s))), trial)
        t *= 0.5
    state.k += 1
    return StepResult(x, f, g, "no-progress", 0.0, state.max_trials)


def converged(state: OptimizerState, chi_history, pg_norm: float) -> tuple[bool, str]:
    if state.k >= state.max_iter:
        return True, "budget"
    if pg_norm < state.tol_grad:
        return True, "stationary"
    if state.tol_chi > 0 and len(chi_history) >= 3:
        old, new = chi_history[-3], chi_history[-1]
        if old > 0 and (old - new) / old < state.tol_chi:
            return True, "stalled"
    return False, ""


@dataclass
class MinimizeResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    chi: list[float]
    journal: list[dict]
    reason: str


def minimize(evaluator: Evaluator, x0, state: OptimizerState, callback=None) -> MinimizeResult:
    x = np.clip(np.asarray(x0, dtype=float), state.lower, state.upper)
    f, g = evaluator(x)
    g = resolve_gradient(g)
    state.n_evals += 1
    chi = [float(f)]
    pg = float(np.max(np.abs(projected_gradient(x, g, state.lower, state.upper)), initial=0.0))
    journal = [dict(iter=0, chi=float(f), proj_grad_norm=pg, step_len=0.0, n_evals=state.n_evals)]
    while True:
        done, reason = converged(state, chi, pg)
        if done:
            break
        res = step(state, x, f, g, evaluator)
        if res.status != "ok":
            reason = "no-progress"
            break
        x, f, g = res.x, res.f, res.g
        chi.append(f)
        pg = float(np.max(np.abs(projected_gradient(x, g, state.lower, state.upper)), initial=0.0))
        journal.append(dict(iter=state.k, chi=f, proj_grad_norm=pg, step_len=res.step_length,
                            n_evals=state.n_evals))
        if callback is not None:
            callback(state.k, x, f)
    return MinimizeResult(x=x, f=float(f), g=g, chi=chi, journal=journal, reason=reason)
