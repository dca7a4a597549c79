"""Concave maximization over per-prompt parameter blocks.

Both the reward fit and the DPO fit have objectives whose Hessian is block
diagonal over prompts, so a Newton direction costs one small pseudo-inverse
per prompt.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConvergenceError, InvalidInputError

METHODS = ("newton", "gradient")


@dataclass(frozen=True)
class FitResult:
    params: np.ndarray
    value: float
    grad_norm: float
    iterations: int


def maximize(
    fun: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    hess_blocks: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    *,
    tol: float,
    max_iters: int,
    method: str = "newton",
    step_size: float = 0.5,
) -> FitResult:
    """Maximize a smooth concave function of a (prompts, responses) array.

    ``newton`` takes damped Newton steps with Armijo backtracking.
    ``gradient`` takes fixed-size gradient steps. Both stop once the gradient
    norm drops to ``tol`` and raise ConvergenceError otherwise.
    """
    if method not in METHODS:
        raise InvalidInputError(f"unknown optimizer method {method!r}")
    x = np.array(x0, dtype=float)
    f = fun(x)
    g = grad(x)
    gnorm = float(np.linalg.norm(g))
    for it in range(max_iters):
        if gnorm <= tol:
            return FitResult(x, f, gnorm, it)
        if method == "gradient":
            x = x + step_size * g
            f = fun(x)
        else:
            H = hess_blocks(x)
            # -H is PSD; pinv gives the min-norm direction inside flat (gauge) subspaces
            d = np.einsum("pij,pj->pi", np.linalg.pinv(-H, hermitian=True), g)
            slope = float(np.sum(g * d))
            if slope <= 0:
                d, slope = g, gnorm**2
            # near the optimum the gain drops below roundoff of f; accept on gradient decrease
            noise = 64 * np.finfo(float).eps * max(1.0, abs(f))
            t = 1.0
            while True:
                x_new = x + t * d
                f_new = fun(x_new)
                if f_new >= f + 1e-4 * t * slope:
                    g_new = None
                    break
                if f_new >= f - noise:
                    g_new = grad(x_new)
                    if np.linalg.norm(g_new) < gnorm:
                        break
                t *= 0.5
                if t < 1e-12:
                    raise ConvergenceError(
                        f"line search failed with gradient norm {gnorm:.3e}", gnorm, it
                    )
            x, f = x_new, f_new
            if g_new is not None:
                g = g_new
                gnorm = float(np.linalg.norm(g))
                continue
        g = grad(x)
        gnorm = float(np.linalg.norm(g))
        if not np.isfinite(gnorm) or not np.isfinite(f):
            raise ConvergenceError("objective became non-finite", gnorm, it + 1)
    if gnorm <= tol:
        return FitResult(x, f, gnorm, max_iters)
    raise ConvergenceError(
        f"no convergence in {max_iters} iterations (gradient norm {gnorm:.3e} > {tol:.1e})",
        gnorm,
        max_iters,
    )
