"""Quadratic dissipative ODE model du/dt = F1 u + F2 (u kron u).

Holds the nonlinearity parameter K = 4 ||u_in|| ||F2|| / |Re lambda_1|,
rescaling, and the fixed-step RK4 reference integrator used as the
ground-truth oracle throughout the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .sparse import DENSE_ORACLE_CAP, SparseMatrix, dense_eigs, spectral_norm

SQRT_HALF = math.sqrt(2.0) / 2.0


@dataclass(frozen=True)
class QuadraticODE:
    n: int
    F1: SparseMatrix
    F2: SparseMatrix
    u_in: np.ndarray
    s: int = 0  # max row/col nonzeros over F1 and F2, filled by validate()

    def rhs(self, u: np.ndarray) -> np.ndarray:
        return self.F1.matvec(u) + self.F2.matvec(np.kron(u, u))


def make_ode(n: int, F1: SparseMatrix, F2: SparseMatrix, u_in,
             assume_valid: bool = False,
             dense_cap: int = DENSE_ORACLE_CAP) -> QuadraticODE:
    """Build and validate a problem instance.

    Normality of F1 and dissipativity (all Re lambda < 0) are verified with
    the dense oracle when n is under the cap; above the cap the caller must
    pass assume_valid=True.
    """
    u_in = np.asarray(u_in, dtype=np.float64)
    if F1.rows != n or F1.cols != n:
        raise ValidationError(f"F1 must be {n}x{n}")
    if F2.rows != n or F2.cols != n * n:
        raise ValidationError(f"F2 must be {n}x{n * n}")
    if u_in.shape != (n,):
        raise ValidationError(f"u_in must have length {n}")
    s = max(F1.sparsity(), F2.sparsity())
    if not assume_valid:
        if n * n > dense_cap:
            raise ValidationError(
                "n exceeds the dense check cap; pass assume_valid to skip checks"
            )
        d1 = F1.to_dense(dense_cap)
        comm = np.linalg.norm(d1 @ d1.T - d1.T @ d1)
        norm1 = spectral_norm(F1) if F1.nnz else 0.0
        if comm > 1e-10 * max(norm1**2, np.finfo(float).tiny):
            raise ValidationError("F1 is not normal")
        lam = dense_eigs(d1, dense_cap)
        if lam.size and lam.real.max() >= 0:
            raise ValidationError(
                f"F1 is not dissipative: max Re(lambda) = {lam.real.max():.3e}"
            )
    return QuadraticODE(n=n, F1=F1, F2=F2, u_in=u_in, s=s)


@dataclass(frozen=True)
class NonlinearityParams:
    K: float
    re_lambda1: float      # max real part of F1's spectrum (negative)
    norm_F2: float
    norm_u_in: float
    flag_K_large: bool     # K >= sqrt(2)/2: post-selection bound unavailable
    flag_K_below_u: bool   # K < ||u_in||: rescaling assumption not yet met


def compute_K(ode: QuadraticODE, dense_cap: int = DENSE_ORACLE_CAP) -> NonlinearityParams:
    """Nonlinearity parameter K and its ingredients; soft flags, hard dissipativity."""
    d1 = ode.F1.to_dense(dense_cap)
    lam = dense_eigs(d1, dense_cap)
    re1 = float(lam.real.max())
    if re1 >= 0:
        raise ValidationError(f"not dissipative: max Re(lambda) = {re1:.3e}")
    norm_f2 = spectral_norm(ode.F2) if ode.F2.nnz else 0.0
    norm_u = float(np.linalg.norm(ode.u_in))
    K = 4.0 * norm_u * norm_f2 / abs(re1)
    return NonlinearityParams(
        K=K,
        re_lambda1=re1,
        norm_F2=norm_f2,
        norm_u_in=norm_u,
        flag_K_large=K >= SQRT_HALF,
        flag_K_below_u=K < norm_u,
    )


def rescale(ode: QuadraticODE, zeta: float) -> QuadraticODE:
    """Substitute u -> zeta*u: u_in' = zeta u_in, F2' = F2/zeta. K is invariant."""
    if zeta <= 0:
        raise ValidationError("zeta must be positive")
    return QuadraticODE(
        n=ode.n,
        F1=ode.F1,
        F2=ode.F2.scaled(1.0 / zeta),
        u_in=ode.u_in * zeta,
        s=ode.s,
    )


@dataclass
class Trajectory:
    ts: np.ndarray
    us: np.ndarray              # shape (len(ts), n)
    richardson_error: float     # ||u_dt(T) - u_{dt/2}(T)|| / 15

    def at_time(self, t: float) -> np.ndarray:
        idx = int(np.argmin(np.abs(self.ts - t)))
        if abs(self.ts[idx] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValidationError(f"t={t} is not on the trajectory grid")
        return self.us[idx]

    def final(self) -> np.ndarray:
        return self.us[-1]


def default_dt(ode: QuadraticODE, T: float) -> float:
    norm_f1 = spectral_norm(ode.F1) if ode.F1.nnz else 0.0
    candidates = [T / 1000.0 if T > 0 else 1.0]
    if norm_f1 > 0:
        candidates.append(1.0 / (10.0 * norm_f1))
    return min(candidates)


def _rk4(rhs, u0: np.ndarray, T: float, steps: int, diverge_norm: float):
    n = u0.size
    us = np.empty((steps + 1, n))
    us[0] = u0
    dt = T / steps if steps else 0.0
    u = u0.astype(np.float64).copy()
    for i in range(steps):
        k1 = rhs(u)
        k2 = rhs(u + 0.5 * dt * k1)
        k3 = rhs(u + 0.5 * dt * k2)
        k4 = rhs(u + dt * k3)
        u = u + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if np.linalg.norm(u) > diverge_norm:
            raise NumericalError(
                f"trajectory diverged at t={dt * (i + 1):.4g}: "
                "the instance does not look dissipative"
            )
        us[i + 1] = u
    return us


def reference_solution(ode: QuadraticODE, T: float, dt: float | None = None) -> Trajectory:
    """Fixed-step RK4 ground truth with a step-halving error estimate."""
    if T < 0:
        raise ValidationError("T must be nonnegative")
    if T == 0:
        return Trajectory(
            ts=np.array([0.0]), us=ode.u_in[None, :].copy(), richardson_error=0.0
        )
    if dt is None:
        dt = default_dt(ode, T)
    if dt <= 0:
        raise ValidationError("dt must be positive")
    steps = max(1, int(math.ceil(T / dt)))
    diverge = 1e3 * max(np.linalg.norm(ode.u_in), np.finfo(float).tiny)
    us = _rk4(ode.rhs, ode.u_in, T, steps, diverge)
    us_half = _rk4(ode.rhs, ode.u_in, T, 2 * steps, diverge)
    est = float(np.linalg.norm(us[-1] - us_half[-1])) / 15.0
    ts = np.linspace(0.0, T, steps + 1)
    return Trajectory(ts=ts, us=us, richardson_error=est)


def bernoulli_closed_form(a: float, u0: float, t: float) -> float:
    """Exact solution of du/dt = -u + a u^2 with u(0) = u0.

    u(t) = 1 / (a + (1/u0 - a) e^t); the independent 1-d oracle.
    """
    if u0 == 0.0:
        return 0.0
    denom = a + (1.0 / u0 - a) * math.exp(t)
    denom0 = 1.0 / u0
    if denom == 0.0 or (denom > 0) != (denom0 > 0):
        raise NumericalError(f"Bernoulli solution crosses a pole before t={t}")
    return 1.0 / denom
