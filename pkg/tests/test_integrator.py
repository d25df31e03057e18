import io
import math

import mpmath
import numpy as np
import pytest

from rpsde.model import ModelError, SdeModel, builtin_example
from rpsde.integrator import (SolverConfig, SolverError, Stepper, drift_jacobian, implicit_step,
                              integrate, integrate_batch)
from rpsde.noise import GridError, GridSpec, WienerPath, keyed_normals, sample_path


def zero_drift(t, x):
    return np.zeros_like(x)


def linear_model(lam=1.0, g=1.0):
    return SdeModel([lam], zero_drift, lambda t: g, 1.0, c_f=0.5, c_g=max(abs(g), 1.0),
                    drift_jac=lambda t, x: np.zeros(x.shape + (x.shape[-1],)))


@pytest.fixture(scope="module")
def ex1():
    return builtin_example("example1")


@pytest.fixture(scope="module")
def ex2():
    return builtin_example("example2")


def test_zero_drift_step_closed_form():
    m = linear_model(lam=2.0)
    x = implicit_step(m, 0.5, [3.0], [0.2], 0.1)
    assert x[0] == pytest.approx(3.2 / 1.2, rel=1e-15)


def test_example1_step_closed_form(ex1):
    h, t = 0.1, 0.3
    x = implicit_step(ex1, t, [0.7], [-0.05], h)
    expected = (0.7 - 0.05 + h * math.sin(2 * math.pi * t)) / (1 + math.pi * h)
    assert x[0] == pytest.approx(expected, abs=1e-15)


def test_example2_step_against_bisection(ex2):
    h, t, xp, noise = 0.1, 0.3, 1.0, 0.05
    lam = 2 * math.pi

    def phi(v):
        return (1 + h * lam) * v - h * (v - v**3 + math.cos(math.pi * t)) - xp - noise

    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if phi(mid) < 0 else (lo, mid)
    x = implicit_step(ex2, t, [xp], [noise], h)
    assert x[0] == pytest.approx(0.5 * (lo + hi), abs=1e-10)
    assert abs(phi(x[0])) <= 1e-12


def test_homogeneous_geometric_decay():
    lam, h, n = 1.5, 0.05, 200
    m = linear_model(lam=lam, g=0.0)
    grid = GridSpec(0.0, h, n)
    tr = integrate(m, grid, sample_path(grid, 0, 0), [2.0])
    expected = 2.0 * (1 + lam * h) ** -np.arange(n + 1)
    np.testing.assert_allclose(tr.states[:, 0], expected, rtol=1e-12)


def test_example1_matches_discrete_convolution(ex1):
    # the scheme is linear for this model, so x_n is an explicit sum
    h, n = 0.05, 60
    grid = GridSpec(0.0, h, n)
    path = sample_path(grid, 17, 2)
    tr = integrate(ex1, grid, path, [0.4])
    mpmath.mp.dps = 40
    a = 1 + mpmath.pi * h
    dW = [mpmath.mpf(float(v)) for v in path.increments[:, 0]]
    xn = mpmath.mpf("0.4")
    for j in range(n):
        t_next = mpmath.mpf(j + 1) * mpmath.mpf(h)
        xn = (xn + dW[j] + h * mpmath.sin(2 * mpmath.pi * t_next)) / a
    assert tr.states[-1, 0] == pytest.approx(float(xn), abs=1e-12)


def test_jacobian_example2_value(ex2):
    assert drift_jacobian(ex2, 0.0, np.array([2.0]))[0, 0] == pytest.approx(-11.0)


def test_finite_difference_jacobian_agrees(ex2):
    fd = SdeModel(ex2.lambda_eigs, ex2.drift_f, ex2.diffusion_g, ex2.tau, ex2.c_f, ex2.c_g, ex2.gamma)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-3, 3, (100, 1))
    for t in rng.uniform(0, 2, 4):
        np.testing.assert_allclose(drift_jacobian(fd, t, pts), drift_jacobian(ex2, t, pts), atol=1e-6)


def test_fd_disabled_without_analytic_jacobian_raises():
    m = SdeModel([1.0], zero_drift, lambda t: 1.0, 1.0, 0.0, 1.0)
    with pytest.raises(SolverError):
        drift_jacobian(m, 0.0, np.zeros((1, 1)), SolverConfig(allow_fd=False))


@pytest.mark.parametrize("h", [0.1, 0.01])
def test_pathwise_contraction_shared_noise(ex2, h):
    grid = GridSpec.spanning(0.0, 5.0, h)
    inc = math.sqrt(h) * keyed_normals(7, [0], np.arange(grid.n_cells), 1)
    inc = np.repeat(inc, 2, axis=0)
    out, _, res = integrate_batch(ex2, grid, inc, np.array([[1.0], [-2.0]]))
    diff = np.abs(out[0, :, 0] - out[1, :, 0])
    rate = (1 + h * 2 * math.pi) / (1 + h * 1.0)
    bound = diff[:-1] / rate
    assert np.all(diff[1:] <= bound * (1 + 1e-12) + 1e-15)
    assert res.max() <= 1e-12


def test_linear_recursion_exact_over_many_steps():
    lam, h, n = 2.0, 0.01, 10_000
    m = linear_model(lam=lam)
    grid = GridSpec(0.0, h, n)
    path = sample_path(grid, 4, 0)
    tr = integrate(m, grid, path, [1.0])
    x = 1.0
    a = 1 + lam * h
    ref = np.empty(n + 1)
    ref[0] = x
    for j, dw in enumerate(path.increments[:, 0]):
        x = (x + dw) / a
        ref[j + 1] = x
    np.testing.assert_allclose(tr.states[:, 0], ref, rtol=1e-13, atol=1e-15)


def test_grids_a_period_apart_give_identical_steps(ex2):
    h = 0.01
    ga, gb = GridSpec.spanning(0.0, 2.0, h), GridSpec.spanning(-4.0, -2.0, h)
    pa = sample_path(ga, 3, 0)
    pb = WienerPath(gb, pa.seed, pa.stream_id, pa.increments)
    xa = integrate(ex2, ga, pa, [0.3]).states
    xb = integrate(ex2, gb, pb, [0.3]).states
    assert xa.tobytes() == xb.tobytes()


def test_second_moment_stays_bounded(ex2):
    h, T, n = 0.02, 20.0, 400
    grid = GridSpec.spanning(0.0, T, h)
    inc = math.sqrt(h) * keyed_normals(11, np.arange(n), np.arange(grid.n_cells), 1)
    out, _, _ = integrate_batch(ex2, grid, inc, 0.0)
    m2 = np.mean(out[:, 1:, 0] ** 2, axis=0)
    running = np.array([np.median(m2[: j + 1]) for j in range(0, m2.size, 50)])
    assert m2.max() <= 2 * running[-1]
    assert np.all(np.isfinite(m2))


def test_batch_rows_match_single_runs(ex2):
    h = 0.05
    grid = GridSpec.spanning(0.0, 3.0, h)
    inc = math.sqrt(h) * keyed_normals(2, np.arange(8), np.arange(grid.n_cells), 1)
    x0 = np.linspace(-2, 2, 8)[:, None]
    batch, _, _ = integrate_batch(ex2, grid, inc, x0)
    for i in (0, 3, 7):
        single, _, _ = integrate_batch(ex2, grid, inc[i:i + 1], x0[i])
        assert single[0].tobytes() == batch[i].tobytes()


def test_fallback_solves_when_newton_budget_exhausted(ex2):
    st = Stepper(ex2, 0.1, SolverConfig(max_newton_iters=1))
    rhs = np.array([[5.0], [-3.0], [0.2]])
    x, iters, r = st.solve(0.3, rhs, x_prev=rhs)
    assert np.all(r <= 1e-12)
    ref = Stepper(ex2, 0.1).solve(0.3, rhs)[0]
    np.testing.assert_allclose(x, ref, atol=1e-12)


def test_fallback_two_dimensional():
    def f(t, x):
        return np.stack([-x[..., 0] ** 3 + x[..., 1], -x[..., 1] ** 3 + np.sin(2 * np.pi * t)], axis=-1)

    m = SdeModel([2.0, 3.0], f, lambda t: 1.0, 1.0, c_f=1.0, c_g=1.0)
    st = Stepper(m, 0.1, SolverConfig(max_newton_iters=1))
    rhs = np.array([[4.0, -2.0], [0.1, 0.2]])
    x, _, r = st.solve(0.2, rhs, x_prev=rhs)
    assert np.all(r <= 1e-12)
    np.testing.assert_allclose(st.residual(0.2, x, rhs), 0.0, atol=1e-12)


def test_unsolvable_step_raises_solver_error():
    # a discontinuous drift: the step equation has no root
    m = SdeModel([1.0], lambda t, x: -20.0 * np.sign(x), lambda t: 1.0, 1.0, c_f=0.5, c_g=1.0,
                 drift_jac=lambda t, x: np.zeros(x.shape + (1,)))
    with pytest.raises(SolverError) as info:
        Stepper(m, 0.5, SolverConfig(max_newton_iters=3)).solve(0.0, np.array([[0.1]]))
    assert info.value.row == 0
    assert info.value.residual > 1e-12


def test_rejects_bad_step_and_nondissipative_models(ex1):
    with pytest.raises(GridError):
        integrate_batch(ex1, GridSpec(0.0, 1.0, 2), np.zeros((1, 2, 1)), 0.0)
    m = SdeModel([1.0], zero_drift, lambda t: 1.0, 1.0, c_f=1.0, c_g=1.0)
    with pytest.raises(ModelError):
        integrate_batch(m, GridSpec(0.0, 0.1, 2), np.zeros((1, 2, 1)), 0.0)


def test_trajectory_csv(ex1):
    grid = GridSpec.spanning(0.0, 1.0, 0.25)
    tr = integrate(ex1, grid, sample_path(grid, 1, 0), [0.0])
    buf = io.StringIO()
    tr.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,x_1,newton_iters,residual"
    assert len(lines) == 6
    assert float(lines[-1].split(",")[1]) == tr.states[-1, 0]
    assert tr.at(0.5).tobytes() == tr.states[2].tobytes()
