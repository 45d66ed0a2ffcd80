import math

import numpy as np
import pytest

from hpmsim.errors import NumericalError, ValidationError
from hpmsim.ode import (
    bernoulli_closed_form,
    compute_K,
    make_ode,
    reference_solution,
    rescale,
)
from hpmsim.sparse import SparseMatrix, spectral_norm


def std1():
    F1 = SparseMatrix.from_triplets(1, 1, [(0, 0, -1.0)])
    F2 = SparseMatrix.from_triplets(1, 1, [(0, 0, 0.2)])
    return make_ode(1, F1, F2, [0.5])


def test_compute_K_std1():
    nl = compute_K(std1())
    assert nl.K == pytest.approx(0.4, abs=1e-12)
    assert nl.re_lambda1 == pytest.approx(-1.0, abs=1e-10)
    assert nl.flag_K_below_u            # 0.4 < 0.5: rescaling still needed
    assert not nl.flag_K_large


def test_compute_K_linear():
    F1 = SparseMatrix.from_triplets(2, 2, [(0, 0, -1.0), (1, 1, -3.0)])
    F2 = SparseMatrix.zeros(2, 4)
    nl = compute_K(make_ode(2, F1, F2, [0.3, 0.1]))
    assert nl.K == 0.0


def test_compute_K_cross_checked_with_svd():
    F1 = SparseMatrix.from_triplets(2, 2, [(0, 0, -1.0), (1, 1, -3.0)])
    F2 = SparseMatrix.from_triplets(2, 4, [(0, 1, 0.3), (1, 2, -0.2), (0, 3, 0.1)])
    u_in = np.array([0.3, 0.1])
    nl = compute_K(make_ode(2, F1, F2, u_in))
    norm_f2 = np.linalg.svd(F2.to_dense(), compute_uv=False)[0]
    expected = 4.0 * np.linalg.norm(u_in) * norm_f2 / 1.0
    assert nl.K == pytest.approx(expected, abs=1e-8)


def test_not_dissipative_rejected():
    F1 = SparseMatrix.from_triplets(1, 1, [(0, 0, 0.5)])
    F2 = SparseMatrix.zeros(1, 1)
    with pytest.raises(ValidationError, match="dissipative"):
        make_ode(1, F1, F2, [1.0])


def test_non_normal_rejected():
    # [[-1, 5], [0, -1]]: stable but far from normal
    F1 = SparseMatrix.from_triplets(2, 2, [(0, 0, -1.0), (0, 1, 5.0), (1, 1, -1.0)])
    F2 = SparseMatrix.zeros(2, 4)
    with pytest.raises(ValidationError, match="normal"):
        make_ode(2, F1, F2, [1.0, 0.0])


def test_rescale_identity():
    ode = std1()
    same = rescale(ode, 1.0)
    assert np.array_equal(same.u_in, ode.u_in)
    assert np.array_equal(same.F2.to_dense(), ode.F2.to_dense())


def test_rescale_std1_numbers():
    # zeta = K/||u_in|| = 0.8 gives ||u_in'|| = 0.4 = K, ||F2'|| = 0.25
    scaled = rescale(std1(), 0.8)
    assert np.linalg.norm(scaled.u_in) == pytest.approx(0.4, abs=1e-15)
    assert spectral_norm(scaled.F2) == pytest.approx(0.25, rel=1e-10)
    nl = compute_K(scaled)
    assert nl.K == pytest.approx(0.4, abs=1e-12)
    assert not nl.flag_K_below_u


def test_rescale_rejects_nonpositive():
    with pytest.raises(ValidationError):
        rescale(std1(), 0.0)


def test_rescale_solution_equivalence():
    # u'(t) = zeta u(t): solve both systems and compare trajectories
    ode = std1()
    zeta = 0.8
    scaled = rescale(ode, zeta)
    ref = reference_solution(ode, 1.0, dt=1e-3)
    ref_s = reference_solution(scaled, 1.0, dt=1e-3)
    assert np.allclose(zeta * ref.us, ref_s.us, atol=1e-8)


def test_reference_linear_exact():
    F1 = SparseMatrix.from_triplets(1, 1, [(0, 0, -1.0)])
    F2 = SparseMatrix.zeros(1, 1)
    ode = make_ode(1, F1, F2, [0.5])
    ref = reference_solution(ode, 1.0)
    assert ref.final()[0] == pytest.approx(0.5 * math.exp(-1.0), abs=1e-10)


def test_reference_vs_bernoulli_oracle():
    ref = reference_solution(std1(), 1.0)
    exact = bernoulli_closed_form(0.2, 0.5, 1.0)
    assert exact == pytest.approx(0.19635150275025284, abs=1e-15)
    assert ref.final()[0] == pytest.approx(exact, abs=1e-10)


def test_reference_T_zero():
    ref = reference_solution(std1(), 0.0)
    assert np.array_equal(ref.final(), np.array([0.5]))


def test_reference_divergence_detected():
    # strong positive quadratic feedback blows past 1000x the initial norm
    F1 = SparseMatrix.from_triplets(1, 1, [(0, 0, -0.01)])
    F2 = SparseMatrix.from_triplets(1, 1, [(0, 0, 50.0)])
    ode = make_ode(1, F1, F2, [1.0])
    with pytest.raises(NumericalError, match="diverged"):
        reference_solution(ode, 5.0, dt=1e-3)


def test_rk4_order():
    # halving dt shrinks the error ~16x for a smooth nonlinear flow
    ode = std1()
    exact = bernoulli_closed_form(0.2, 0.5, 1.0)
    errs = []
    for dt in (2e-2, 1e-2):
        errs.append(abs(reference_solution(ode, 1.0, dt=dt).final()[0] - exact))
    ratio = errs[0] / errs[1]
    assert 12.0 <= ratio <= 20.0


def test_dissipative_norm_decay():
    # for K < 1 the solution norm never exceeds the initial norm
    rng = np.random.default_rng(11)
    for trial in range(5):
        diag = -rng.uniform(0.5, 2.0, 2)
        F1 = SparseMatrix.from_dense(np.diag(diag))
        F2d = rng.normal(size=(2, 4)) * 0.05
        F2 = SparseMatrix.from_dense(F2d)
        u_in = rng.normal(size=2) * 0.2
        ode = make_ode(2, F1, F2, u_in)
        assert compute_K(ode).K < 1.0
        ref = reference_solution(ode, 2.0, dt=1e-3)
        norms = np.linalg.norm(ref.us, axis=1)
        assert norms.max() <= np.linalg.norm(u_in) * (1 + 1e-8), trial


def test_bernoulli_reduces_to_linear():
    assert bernoulli_closed_form(0.0, 0.5, 1.0) == pytest.approx(
        0.5 * math.exp(-1.0), rel=1e-14)


def test_bernoulli_initial_value():
    assert bernoulli_closed_form(0.2, 0.5, 0.0) == pytest.approx(0.5, rel=1e-14)


def test_bernoulli_pole_crossing():
    # a=2, u0=1: denominator 2 - e^t crosses zero at t = ln 2
    with pytest.raises(NumericalError, match="pole"):
        bernoulli_closed_form(2.0, 1.0, 1.0)
