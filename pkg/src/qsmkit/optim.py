"""Matrix-free solvers shared by the regularized reconstruction methods."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DivergenceError(RuntimeError):
    """The objective stopped decreasing in a way that indicates divergence."""


def conjugate_gradient(apply_op, rhs, x0=None, tol=1e-6, maxiter=100):
    """Conjugate gradient for a symmetric positive (semi)definite operator.

    `apply_op` maps an ndarray to an ndarray of the same shape; `rhs` sets
    the shape. Stops when the residual norm falls below tol * ||rhs||.

    Returns
    -------
    (x, iterations, relative_residual)
    """
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return np.zeros_like(rhs), 0, 0.0
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=float)
    r = rhs - apply_op(x)
    p = r.copy()
    rs = float(np.vdot(r, r).real)
    iterations = 0
    for _ in range(maxiter):
        if np.sqrt(rs) / rhs_norm <= tol:
            break
        ap = apply_op(p)
        denom = float(np.vdot(p, ap).real)
        if denom <= 0.0:
            break  # lost positive definiteness to rounding
        alpha = rs / denom
        x += alpha * p
        r -= alpha * ap
        rs_new = float(np.vdot(r, r).real)
        p = r + (rs_new / rs) * p
        rs = rs_new
        iterations += 1
    return x, iterations, float(np.sqrt(rs) / rhs_norm)


@dataclass(frozen=True)
class StepRule:
    """Backtracking line-search parameters for gradient descent."""

    initial: float | None = None  # None: 1/||grad|| at the start point
    grow: float = 2.0
    shrink: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 40


def gradient_descent(value_and_grad, x0, iters, step_rule=None,
                     value_only=None, callback=None):
    """Minimize a smooth objective over a tuple of arrays.

    Each iteration takes a steepest-descent step whose length satisfies the
    Armijo condition f(x - a*g) <= f(x) - c*a*||g||^2, found by halving from
    a step that grows between iterations. Accepted values are therefore
    non-increasing by construction; this is asserted on every iteration.

    Parameters
    ----------
    value_and_grad : callable x_tuple -> (float, grad_tuple)
    x0 : tuple of ndarrays (copied)
    value_only : optional cheaper callable x_tuple -> float for line search
    callback : optional callable (iteration, x_tuple, value)

    Returns
    -------
    (x, trace, info) with trace the accepted objective values (including the
    start) and info = {"iterations", "stalled", "step"}.

    Raises
    ------
    DivergenceError if the objective becomes non-finite or fails to decrease
    over 10 consecutive iterations while a descent direction remains.
    """
    rule = step_rule or StepRule()
    if value_only is None:
        value_only = lambda xs: value_and_grad(xs)[0]
    x = tuple(np.array(a, dtype=float) for a in x0)
    f, g = value_and_grad(x)
    if not np.isfinite(f):
        raise DivergenceError("objective is not finite at the start point")
    trace = [f]
    gnorm2 = sum(float(np.vdot(gi, gi).real) for gi in g)
    step = rule.initial if rule.initial is not None else \
        (1.0 if gnorm2 == 0.0 else 1.0 / np.sqrt(gnorm2))
    stalled = False
    failures = 0
    it = 0
    for it in range(1, iters + 1):
        if gnorm2 == 0.0:
            break
        a = step * rule.grow
        accepted = False
        best = np.inf
        for _ in range(rule.max_backtracks):
            trial = tuple(xi - a * gi for xi, gi in zip(x, g))
            f_trial = value_only(trial)
            if not np.isfinite(f_trial):
                a *= rule.shrink
                continue
            best = min(best, f_trial)
            if f_trial <= f - rule.armijo * a * gnorm2:
                accepted = True
                break
            a *= rule.shrink
        if not accepted:
            if best > f + abs(f) * 1e-12 + 1e-300:
                failures += 1
                if failures >= 10:
                    raise DivergenceError(
                        f"objective rose on {failures} consecutive iterations "
                        f"(value {f:.6g})")
                step = a  # retry from the smallest step tried
                continue
            stalled = True  # flat to machine precision: converged
            break
        failures = 0
        step = a
        x = trial
        f, g = value_and_grad(x)
        assert f <= trace[-1], "line search accepted an increasing step"
        trace.append(f)
        gnorm2 = sum(float(np.vdot(gi, gi).real) for gi in g)
        if callback is not None:
            callback(it, x, f)
    return x, np.asarray(trace), {"iterations": it, "stalled": stalled,
                                  "step": step}
