"""Preconditioned conjugate gradients and GMRES with residual histories and
the log-interpolated fractional iteration count.

Both solvers stop on a relative residual reduction; fractional iterations
interpolate the history between the last two entries on a log scale, so that
methods converging in very few steps can still be compared meaningfully.
CG additionally records the sqrt(r^T z) energy-error surrogate per step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .flops import FlopCounter

__all__ = ["KrylovResult", "pcg", "pgmres", "fractional_iterations"]


@dataclass
class KrylovResult:
    converged: bool
    iterations: int
    nu_frac: float
    history: list[float]            # residual norms e_0 .. e_nu
    energy_history: list[float]     # CG: sqrt(r^T z) per step; GMRES: empty
    delta_red: float
    eps_tol: float
    x: np.ndarray


def fractional_iterations(history, delta_red: float) -> float:
    """nu - 1 + log(e_{nu-1}/eps_tol) / log(e_{nu-1}/e_nu) with
    eps_tol = e_0 * delta_red; falls back to the integer count if the history
    does not decrease monotonically through the threshold."""
    hist = [float(h) for h in history]
    if not hist:
        return 0.0
    eps_tol = hist[0] * delta_red
    nu = None
    for i, e in enumerate(hist):
        if e <= eps_tol:
            nu = i
            break
    if nu is None:
        return float(len(hist) - 1)
    if nu == 0:
        return 0.0
    e_prev, e_nu = hist[nu - 1], hist[nu]
    if e_nu == eps_tol:
        return float(nu)
    if not (e_prev > eps_tol >= e_nu) or e_nu <= 0.0 or e_prev <= e_nu:
        warnings.warn("history not monotone at the crossing; "
                      "falling back to the integer iteration count")
        return float(nu)
    return nu - 1 + np.log(e_prev / eps_tol) / np.log(e_prev / e_nu)


def _identity_precond(r: np.ndarray, out: np.ndarray) -> None:
    np.copyto(out, r)


def pcg(apply_op, b: np.ndarray, precond=None, delta_red: float = 1e-8,
        max_it: int = 200, counter: FlopCounter | None = None) -> KrylovResult:
    """Preconditioned conjugate gradients for SPD operators.

    apply_op(x, out) and precond(r, out) write their result into out.
    Stops when ||r_k|| <= delta_red * ||r_0||; exceeding max_it yields a
    non-converged result rather than an exception.
    """
    if precond is None:
        precond = _identity_precond
    n = b.size
    x = np.zeros(n)
    r = b.copy()
    z = np.empty(n)
    p = np.empty(n)
    ap = np.empty(n)
    r0 = float(np.linalg.norm(r))
    history = [r0]
    energy = []
    if r0 == 0.0:
        return KrylovResult(True, 0, 0.0, history, energy, delta_red, 0.0, x)
    eps = delta_red * r0
    precond(r, z)
    np.copyto(p, z)
    rz = float(r @ z)
    energy.append(np.sqrt(max(rz, 0.0)))
    converged = False
    it = 0
    while it < max_it:
        apply_op(p, ap)
        pap = float(p @ ap)
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        it += 1
        rn = float(np.linalg.norm(r))
        history.append(rn)
        if counter is not None:
            counter.add("krylov", 10.0 * n)
        if rn <= eps:
            converged = True
            break
        precond(r, z)
        rz_new = float(r @ z)
        energy.append(np.sqrt(max(rz_new, 0.0)))
        beta = rz_new / rz
        rz = rz_new
        p *= beta
        p += z
    nu_frac = fractional_iterations(history, delta_red)
    return KrylovResult(converged, it, nu_frac, history, energy,
                        delta_red, eps, x)


def pgmres(apply_op, b: np.ndarray, precond=None, delta_red: float = 1e-8,
           max_it: int = 200, restart: int = 200,
           counter: FlopCounter | None = None) -> KrylovResult:
    """Right-preconditioned GMRES: the monitored residual is the true one.

    Modified Gram-Schmidt Arnoldi with Givens rotations; no restart needed at
    the problem sizes used here (restart defaults high)."""
    if precond is None:
        precond = _identity_precond
    n = b.size
    x = np.zeros(n)
    r0 = float(np.linalg.norm(b))
    history = [r0]
    if r0 == 0.0:
        return KrylovResult(True, 0, 0.0, history, [], delta_red, 0.0, x)
    eps = delta_red * r0
    tmp = np.empty(n)
    wrk = np.empty(n)
    total_it = 0
    converged = False
    while total_it < max_it and not converged:
        # (re)start
        apply_op(x, tmp)
        r = b - tmp
        beta = float(np.linalg.norm(r))
        if beta <= eps:
            converged = True
            break
        m = min(restart, max_it - total_it)
        v = [r / beta]
        h = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        k_used = 0
        for k in range(m):
            precond(v[k], wrk)
            apply_op(wrk, tmp)
            w = tmp.copy()
            for i in range(k + 1):
                h[i, k] = float(w @ v[i])
                w -= h[i, k] * v[i]
            h[k + 1, k] = float(np.linalg.norm(w))
            if h[k + 1, k] > 0.0:
                v.append(w / h[k + 1, k])
            else:
                v.append(w)
            for i in range(k):
                t = cs[i] * h[i, k] + sn[i] * h[i + 1, k]
                h[i + 1, k] = -sn[i] * h[i, k] + cs[i] * h[i + 1, k]
                h[i, k] = t
            denom = np.hypot(h[k, k], h[k + 1, k])
            cs[k] = h[k, k] / denom
            sn[k] = h[k + 1, k] / denom
            h[k, k] = denom
            h[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            total_it += 1
            k_used = k + 1
            history.append(abs(float(g[k + 1])))
            if counter is not None:
                counter.add("krylov", (4.0 * (k + 1) + 6.0) * n)
            if abs(g[k + 1]) <= eps or total_it >= max_it:
                converged = abs(g[k + 1]) <= eps
                break
        # assemble the correction
        if k_used > 0:
            y = np.linalg.solve(np.triu(h[:k_used, :k_used]), g[:k_used])
            update = np.zeros(n)
            for i in range(k_used):
                update += y[i] * v[i]
            precond(update, wrk)
            x += wrk
    nu_frac = fractional_iterations(history, delta_red)
    return KrylovResult(converged, total_it, nu_frac, history, [],
                        delta_red, eps, x)


def lanczos_min_ritz(apply_op, n: int, steps: int = 50,
                     seed: int = 7) -> float:
    """Smallest Ritz value after a plain Lanczos recurrence (SPD check)."""
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    q_prev = np.zeros(n)
    beta = 0.0
    alphas, betas = [], []
    w = np.empty(n)
    for _ in range(min(steps, n)):
        apply_op(q, w)
        alpha = float(q @ w)
        w = w - alpha * q - beta * q_prev
        beta = float(np.linalg.norm(w))
        alphas.append(alpha)
        if beta < 1e-14:
            break
        betas.append(beta)
        q_prev = q
        q = w / beta
    m = len(alphas)
    t = np.diag(alphas)
    for i in range(m - 1):
        t[i, i + 1] = t[i + 1, i] = betas[i]
    return float(np.linalg.eigvalsh(t)[0])
