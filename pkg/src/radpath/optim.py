"""Parameter-vector optimizers used by the registration stages.

Two deterministic workhorses: fixed-learning-rate gradient descent with
a step-halving safeguard, and a box-constrained limited-memory
quasi-Newton method (projected L-BFGS with Armijo backtracking).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class ObjectiveHandle:
    """A differentiable scalar objective over a flat parameter vector."""

    evaluate: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    dimension: int


@dataclass
class OptimizerReport:
    final_params: np.ndarray
    final_value: float
    iterations_used: int
    converged: bool
    trace: list = field(default_factory=list)


class NonFiniteObjectiveError(RuntimeError):
    """The objective or its gradient produced NaN/inf."""


def _checked_value(obj: ObjectiveHandle, p: np.ndarray) -> float:
    v = float(obj.evaluate(p))
    if not np.isfinite(v):
        raise NonFiniteObjectiveError(f"objective value is not finite at {p!r}")
    return v


def _checked_gradient(obj: ObjectiveHandle, p: np.ndarray) -> np.ndarray:
    g = np.asarray(obj.gradient(p), dtype=np.float64)
    if g.shape != (obj.dimension,):
        raise ValueError(f"gradient length {g.shape} != dimension {obj.dimension}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteObjectiveError("objective gradient is not finite")
    return g


def gradient_descent(obj: ObjectiveHandle, init, learning_rate: float,
                     max_iterations: int, tol: float = 1e-7,
                     project: Callable[[np.ndarray], np.ndarray] | None = None) -> OptimizerReport:
    """Plain gradient descent with a per-iteration step-halving safeguard.

    Each step proposes ``p - lr * g``; if the value increases the step is
    halved, up to five times, and a step that still increases the value
    is rejected (which also ends the run, since nothing would change on
    the next iteration). ``project`` optionally maps each candidate back
    into a feasible set before evaluation.
    """
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    p = np.array(init, dtype=np.float64)
    f = _checked_value(obj, p)
    trace = [f]
    converged = False
    iterations = 0
    for it in range(1, max_iterations + 1):
        iterations = it
        g = _checked_gradient(obj, p)
        step = learning_rate
        accepted = False
        for _ in range(6):  # initial step plus up to 5 halvings
            cand = p - step * g
            if project is not None:
                cand = project(cand)
            fc = _checked_value(obj, cand)
            if fc <= f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        delta = f - fc
        p, f = cand, fc
        trace.append(f)
        if delta < tol:
            converged = True
            break
    return OptimizerReport(p, f, iterations, converged, trace)


def _two_loop_direction(g: np.ndarray, history: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in reversed(history):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        alphas.append((a, rho, s, y))
        q -= a * y
    if history:
        s, y = history[-1]
        q *= float(s @ y) / float(y @ y)
    for a, rho, s, y in reversed(alphas):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def lbfgsb(obj: ObjectiveHandle, init, lower, upper, max_iterations: int,
           memory: int = 10, tol: float = 1e-6) -> OptimizerReport:
    """Box-constrained L-BFGS: two-loop recursion, gradient projection,
    Armijo backtracking (c1 = 1e-4, shrink 0.5, at most 20 trials).

    Iterates always satisfy the bounds; convergence is declared when the
    projected gradient's infinity norm falls below ``tol``.
    """
    x = np.array(init, dtype=np.float64)
    lo = np.full_like(x, -np.inf) if lower is None else np.array(lower, dtype=np.float64)
    hi = np.full_like(x, np.inf) if upper is None else np.array(upper, dtype=np.float64)
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    if np.any(x < lo) or np.any(x > hi):
        raise ValueError("initial point violates the box constraints")

    def clip(p):
        return np.clip(p, lo, hi)

    def projected_gradient(p, g):
        pg = g.copy()
        pg[(p <= lo) & (g > 0)] = 0.0
        pg[(p >= hi) & (g < 0)] = 0.0
        return pg

    f = _checked_value(obj, x)
    g = _checked_gradient(obj, x)
    trace = [f]
    history: list[tuple[np.ndarray, np.ndarray]] = []
    converged = False
    iterations = 0
    for it in range(1, max_iterations + 1):
        iterations = it
        pg = projected_gradient(x, g)
        if np.max(np.abs(pg)) < tol:
            converged = True
            iterations = it - 1
            break
        d = _two_loop_direction(g, history)
        if float(d @ g) >= 0.0:  # not a descent direction; fall back to steepest
            d = -g
        t = 1.0
        accepted = False
        for _ in range(20):
            cand = clip(x + t * d)
            step_vec = cand - x
            if np.max(np.abs(step_vec)) == 0.0:
                break
            fc = _checked_value(obj, cand)
            if fc <= f + 1e-4 * float(g @ step_vec):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        g_new = _checked_gradient(obj, cand)
        s = cand - x
        y = g_new - g
        if float(s @ y) > 1e-10 * float(np.linalg.norm(s) * np.linalg.norm(y) + 1e-300):
            history.append((s, y))
            if len(history) > memory:
                history.pop(0)
        else:
            # Armijo-only backtracking gives no curvature guarantee; a
            # breakdown pair means the stored model is stale, so restart
            # instead of creeping along a badly scaled direction.
            history.clear()
        x, f, g = cand, fc, g_new
        trace.append(f)
    else:
        iterations = max_iterations
    return OptimizerReport(x, f, iterations, converged, trace)
