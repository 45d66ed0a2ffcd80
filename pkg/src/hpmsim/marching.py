"""Taylor time marching as one block linear system.

The marching matrix stacks m Taylor steps of order k plus p copy rows:
unit diagonal, -A h/j couplings inside each step, -identity summation rows
at step boundaries, -identity copy rows at the tail.  The system is unit
lower triangular, so forward substitution solves it exactly; a residual
checked iterative solver doubles as an independent path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cascade import min_order_for_bound, truncation_bound
from .embedding import EmbeddedSystem
from .errors import NumericalError, ValidationError
from .ode import SQRT_HALF, NonlinearityParams
from .sparse import DENSE_ORACLE_CAP, SparseMatrix, dense_expm

SOLVE_FLOOR = 1e-10


@dataclass
class OrderSelection:
    """Truncation order bookkeeping: budget-driven choice vs the hard cap."""
    c: int
    c_formula: int
    c_scan: int
    c_required: int
    c_cap: int | None          # largest order with (c+1)||F2|| <= |Re lambda_1|
    epsilon1: float
    eta_prime: float
    certified: bool            # tail bound at the chosen c meets epsilon1
    warnings: list[str] = field(default_factory=list)


def choose_order(K: float, epsilon: float, eta: float, norm_u_in: float,
                 norm_F2: float, re_lambda1: float, force: bool = False) -> OrderSelection:
    """Pick the truncation order for a target accuracy.

    The order satisfying the error budget is the max of the closed-form
    choice ceil(log_{1/K}(4||u_in|| / ((1-K) eps eta))) and a direct scan of
    the geometric tail against epsilon1 = eps K / (4 eta').  Both are then
    capped so (c+1)||F2|| <= |Re lambda_1| keeps ||e^{At}|| <= c+1 provable;
    a capped order is flagged as not bound-certified.
    """
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    warnings: list[str] = []
    if K == 0.0:
        return OrderSelection(c=0, c_formula=0, c_scan=0, c_required=0,
                              c_cap=None, epsilon1=0.0, eta_prime=0.0,
                              certified=True, warnings=["linear fast path (F2 = 0)"])
    if K >= SQRT_HALF:
        raise ValidationError(
            f"nonlinearity too strong: K = {K:.4g} >= sqrt(2)/2; "
            "the post-selection bound is unavailable"
        )
    eta_prime = eta * K / norm_u_in
    eps_budget = 0.1 * math.sqrt(1.0 - 2.0 * K * K) / eta_prime
    if epsilon > eps_budget:
        msg = (f"epsilon = {epsilon:.4g} exceeds the admissible budget "
               f"0.1 sqrt(1-2K^2)/eta' = {eps_budget:.4g}")
        if not force:
            raise ValidationError(msg)
        warnings.append(msg)
    epsilon1 = epsilon * K / (4.0 * eta_prime)
    arg = 4.0 * norm_u_in / ((1.0 - K) * epsilon * eta)
    c_formula = max(0, math.ceil(math.log(arg) / math.log(1.0 / K))) if arg > 1 else 0
    c_scan = min_order_for_bound(K, epsilon1)
    c_required = max(c_formula, c_scan)
    if norm_F2 > 0:
        c_cap = int(math.floor(abs(re_lambda1) * (1 + 1e-12) / norm_F2)) - 1
    else:
        c_cap = None
    if c_cap is not None and c_cap < 0:
        raise ValidationError(
            f"||F2|| = {norm_F2:.4g} exceeds |Re lambda_1| = {abs(re_lambda1):.4g}: "
            "the exponential-norm precondition fails at every order"
        )
    c = c_required
    certified = True
    if c_cap is not None and c_required > c_cap:
        c = c_cap
        certified = False
        warnings.append(
            f"order capped at {c_cap} by the exponential-norm precondition "
            f"(budget wants {c_required}); tail bound "
            f"{truncation_bound(K, c):.3e} exceeds epsilon1 = {epsilon1:.3e}, "
            "relying on measured truncation error instead"
        )
    return OrderSelection(c=c, c_formula=c_formula, c_scan=c_scan,
                          c_required=c_required, c_cap=c_cap, epsilon1=epsilon1,
                          eta_prime=eta_prime, certified=certified, warnings=warnings)


@dataclass
class TaylorSystemParams:
    c: int
    h: float
    m: int
    k: int
    p: int
    d: int                      # m(k+1) + p
    delta: float
    epsilon1: float
    Omega: float
    g_est: float
    eta_est: float
    eta_prime: float
    norm_A: float
    N: int
    hpm_budget_certified: bool = True
    warnings: list[str] = field(default_factory=list)

    def block_index(self, i: int, j: int) -> int:
        if i < 0 or i > self.m:
            raise ValidationError(f"step index {i} outside 0..{self.m}")
        if i < self.m:
            if j < 0 or j > self.k:
                raise ValidationError(f"inner index {j} outside 0..{self.k}")
            return i * (self.k + 1) + j
        if j < 0 or j > self.p:
            raise ValidationError(f"copy index {j} outside 0..{self.p}")
        return self.m * (self.k + 1) + j


def step_counts(T: float, norm_A: float) -> tuple[int, float]:
    """m = ceil(T ||A||) steps of h = T/m, so ||A h|| <= 1."""
    if T < 0:
        raise ValidationError("T must be nonnegative")
    if T == 0:
        return 1, 0.0
    m = max(1, math.ceil(T * norm_A - 1e-12))
    return m, T / m


def taylor_order_for(Omega: float) -> int:
    """Smallest workable k: floor(2 log(Omega)/log log(Omega)) bumped until
    (k+1)! >= Omega, checked with exact integer factorials."""
    k = 5
    if Omega > math.e ** math.e:
        ln = math.log(Omega)
        k = max(5, int(2.0 * ln / math.log(ln)))
    while math.factorial(k + 1) < Omega:
        k += 1
    return k


def select_parameters(nl: NonlinearityParams, sys: EmbeddedSystem, T: float,
                      epsilon: float, g: float, eta: float,
                      overrides: dict | None = None,
                      force: bool = False) -> TaylorSystemParams:
    """Fill in (c, h, m, k, p, delta) for a target accuracy epsilon.

    The truncation order must match the assembled system; step count and
    grid come from ||A||; delta follows the error budget split and Omega
    = 50 m (c+1)(c+2) g / delta drives the Taylor order.
    """
    overrides = dict(overrides or {})
    if g < 1.0 - 1e-9:
        raise ValidationError(f"g = {g} cannot be below 1")
    if eta <= 0:
        raise ValidationError("eta must be positive")
    c = sys.index.c
    warnings: list[str] = []
    certified = True
    epsilon1 = 0.0
    eta_prime = 0.0
    if nl.K > 0:
        sel = choose_order(nl.K, epsilon, eta, nl.norm_u_in, nl.norm_F2,
                           nl.re_lambda1, force=force)
        warnings.extend(sel.warnings)
        epsilon1, eta_prime = sel.epsilon1, sel.eta_prime
        certified = sel.certified
        if "c" in overrides or sel.c != c:
            if sel.c != c:
                warnings.append(
                    f"order override: using c = {c}, budget selection was {sel.c}"
                )
            certified = nl.K < 1 and truncation_bound(nl.K, c) <= epsilon1
    else:
        warnings.append("linear fast path (F2 = 0)")

    m, h = step_counts(T, sys.norm_A)
    m = int(overrides.get("m", m))
    p = int(overrides.get("p", m))
    h = float(overrides.get("h", T / m if T > 0 else 0.0))
    if m < 1 or p < 1:
        raise ValidationError("m and p must be positive")
    if sys.norm_A * h > 1.0 + 1e-9:
        msg = f"||A h|| = {sys.norm_A * h:.4g} > 1 breaks the per-step contract"
        if not force:
            raise ValidationError(msg)
        warnings.append(msg)

    scale = eta_prime if eta_prime > 0 else 1.0
    delta = epsilon * math.sqrt(max(1.0 - 2.0 * nl.K ** 2, 0.0)) / (
        30.0 * math.sqrt(78.0 * m) * g * scale)
    delta = float(overrides.get("delta", delta))
    if delta <= 0.0:
        raise ValidationError(
            f"solver budget degenerated to delta = {delta} (K = {nl.K:.4g})"
        )
    Omega = 50.0 * m * (c + 1) * (c + 2) * g / delta
    if "k" in overrides:
        k = int(overrides["k"])
        if math.factorial(k + 1) < Omega:
            msg = f"override k = {k} violates (k+1)! >= Omega = {Omega:.4g}"
            if not force:
                raise ValidationError(msg)
            warnings.append(msg)
    else:
        k = taylor_order_for(Omega)
        if math.factorial(k + 1) < Omega:
            raise ValidationError("Taylor order selection failed its own postcondition")
    if 2.0 * m * (c + 1) * (c + 2) > math.factorial(k + 1):
        msg = f"step-error precondition 2m(c+1)(c+2) <= (k+1)! fails at k = {k}"
        if not force:
            raise ValidationError(msg)
        warnings.append(msg)
    d = m * (k + 1) + p
    return TaylorSystemParams(
        c=c, h=h, m=m, k=k, p=p, d=d, delta=delta, epsilon1=epsilon1,
        Omega=Omega, g_est=g, eta_est=eta, eta_prime=eta_prime,
        norm_A=sys.norm_A, N=sys.index.N,
        hpm_budget_certified=certified, warnings=warnings,
    )


def assemble_C(A: SparseMatrix, params: TaylorSystemParams) -> SparseMatrix:
    """The (d+1)N-square marching matrix; unit lower triangular by blocks."""
    N = A.rows
    m, k, p, d, h = params.m, params.k, params.p, params.d, params.h
    C = SparseMatrix((d + 1) * N, (d + 1) * N)
    all_idx = np.arange((d + 1) * N)
    C.add_batch(all_idx, all_idx, np.ones(all_idx.size))
    idx = np.arange(N)
    for i in range(m):
        base = i * (k + 1)
        for j in range(1, k + 1):
            row_off = (base + j) * N
            col_off = (base + j - 1) * N
            C.add_batch(A.row + row_off, A.col + col_off, A.val * (-h / j))
        sum_row = (base + k + 1) * N
        for j in range(k + 1):
            C.add_batch(idx + sum_row, idx + (base + j) * N, -np.ones(N))
    for l in range(d - p + 1, d + 1):
        C.add_batch(idx + l * N, idx + (l - 1) * N, -np.ones(N))
    return C.finalize()


@dataclass
class MarchingSolution:
    x: np.ndarray
    params: TaylorSystemParams
    residual: float

    def extract_block(self, i: int, j: int) -> np.ndarray:
        N = self.params.N
        l = self.params.block_index(i, j)
        return self.x[l * N:(l + 1) * N]

    def extract_final(self) -> np.ndarray:
        return self.extract_block(self.params.m, self.params.p)

    def step_solution(self, i: int) -> np.ndarray:
        """The time-t=ih approximation x_{i,0}."""
        return self.extract_block(i, 0)


def _to_scipy(C: SparseMatrix) -> sp.csr_matrix:
    return sp.csr_matrix((C.val, (C.row, C.col)), shape=(C.rows, C.cols))


def solve_marching(C: SparseMatrix, y_in: np.ndarray, delta: float,
                   params: TaylorSystemParams,
                   solver: str = "forward") -> MarchingSolution:
    """Solve C x = e_0 kron y_in to relative residual min(delta, 1e-10)."""
    N = params.N
    if y_in.shape != (N,):
        raise ValidationError(f"y_in must have length {N}")
    rhs = np.zeros((params.d + 1) * N)
    rhs[:N] = y_in
    Cs = _to_scipy(C)
    target = min(delta, SOLVE_FLOOR) if delta > 0 else SOLVE_FLOOR
    if solver == "forward":
        x = spla.spsolve_triangular(Cs, rhs, lower=True, unit_diagonal=False)
    elif solver == "iterative":
        x, info = spla.gmres(Cs, rhs, rtol=target / 10.0, atol=0.0,
                             restart=200, maxiter=5000)
        if info != 0:
            raise NumericalError(f"gmres did not converge (info={info})")
    else:
        raise ValidationError(f"unknown solver '{solver}'")
    rhs_norm = np.linalg.norm(rhs)
    residual = float(np.linalg.norm(Cs @ x - rhs) / max(rhs_norm, np.finfo(float).tiny))
    if residual > max(target, 1e-12):
        raise NumericalError(
            f"solver '{solver}' residual {residual:.3e} misses target {target:.3e}"
        )
    return MarchingSolution(x=x, params=params, residual=residual)


def taylor_polynomial_apply(A: SparseMatrix, h: float, k: int, v: np.ndarray) -> np.ndarray:
    """T_k(A h) v = sum_{j=0}^{k} (A h)^j / j! v by repeated products."""
    acc = v.astype(np.float64).copy()
    term = v.astype(np.float64).copy()
    for j in range(1, k + 1):
        term = A.matvec(term) * (h / j)
        acc += term
    return acc


def step_errors_vs_expm(sys: EmbeddedSystem, params: TaylorSystemParams,
                        sol: MarchingSolution,
                        dense_cap: int = DENSE_ORACLE_CAP) -> list[dict]:
    """Per-step ||expm(A j h) y_in - x_{j,0}|| against the factorial bound.

    Needs the dense exponential oracle, so only runs under the entry cap.
    """
    N = sys.index.N
    if N * N > dense_cap:
        raise ValidationError("embedded dimension exceeds the dense oracle cap")
    E = dense_expm(sys.A.to_dense(dense_cap) * params.h, dense_cap)
    norm_yin = float(np.linalg.norm(sys.y_in))
    fact = float(math.factorial(params.k + 1))
    rows = []
    exact = sys.y_in.copy()
    for j in range(params.m + 1):
        measured = float(np.linalg.norm(exact - sol.step_solution(j)))
        bound = 2.0 * j * (params.c + 1) * (params.c + 2) * norm_yin / fact
        rows.append({"step": j, "measured": measured, "bound": bound})
        if j < params.m:
            exact = E @ exact
    return rows


def condition_report(C: SparseMatrix, params: TaylorSystemParams,
                     exp_norm_precondition_ok: bool,
                     dense_cap: int = DENSE_ORACLE_CAP) -> dict:
    """kappa(C) against 2e sqrt(k) (m(k+1)+p)(c+2); measured when dense-feasible."""
    m, k, p, c = params.m, params.k, params.p, params.c
    bound = 2.0 * math.e * math.sqrt(k) * (m * (k + 1) + p) * (c + 2)
    preconditions = {
        "norm_Ah_le_1": params.norm_A * params.h <= 1.0 + 1e-9,
        "k_ge_5": k >= 5,
        "factorial_margin": 2.0 * m * (c + 1) * (c + 2) <= math.factorial(k + 1),
        "exp_norm_bound": exp_norm_precondition_ok,
    }
    size = C.rows
    measured = None
    if size * size <= dense_cap:
        sig = np.linalg.svd(C.to_dense(dense_cap), compute_uv=False)
        measured = float(sig[0] / sig[-1])
    return {
        "bound": bound,
        "measured": measured,
        "precondition_ok": all(preconditions.values()),
        "preconditions": preconditions,
        "pass": measured is None or measured <= bound,
    }
