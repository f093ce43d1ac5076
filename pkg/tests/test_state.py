import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from predcode.exceptions import ModeError, ShapeError
from predcode.ops import FilterBank
from predcode.schedules import NesterovSchedule, PolynomialSchedule
from predcode.state import (
    StateProblem,
    infer_states,
    smoothed_state_cost,
    smoothed_transition_grad,
    state_cost,
    state_smooth_grad,
)

from conftest import direct_synthesize, random_bank
from test_prox import cd_lasso


def dense_problem(seed, dim=32, rows=48):
    """A 1x1 bank on a 1x1 grid is a dense LASSO with ``Phi = D[:, :, 0, 0].T``."""
    rng = np.random.default_rng(seed)
    bank = FilterBank(rng.standard_normal((dim, rows, 1, 1)) / np.sqrt(rows))
    x = rng.standard_normal((1, rows, 1, 1))
    lam = rng.uniform(0.05, 0.3, size=(1, dim, 1, 1))
    return StateProblem(x, bank, lam)


def test_state_cost_formula(rng):
    bank = random_bank(rng, q=3, c=2)
    x = rng.standard_normal((2, 2, 4, 4))
    g = rng.standard_normal((2, 3, 4, 4))
    lam = rng.uniform(0.1, 1, size=g.shape)
    C = rng.standard_normal((3, 3))
    prev = rng.standard_normal(g.shape)
    p = StateProblem(x, bank, lam, alpha=0.7, transition=C, prev_state=prev)
    anchor = np.einsum("kj,njyx->nkyx", C, prev)
    expected = 0.5 * (
        np.sum((x - direct_synthesize(bank.filters, g)) ** 2)
        + 0.7 * np.sum(np.abs(g - anchor))
        + np.sum(lam * np.abs(g))
    )
    assert state_cost(g, p) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 1.0))
def test_smoothing_bounds_exact_cost(seed, mu):
    rng = np.random.default_rng(seed)
    bank = random_bank(rng, q=2, c=1)
    g = rng.standard_normal((1, 2, 4, 4))
    p = StateProblem(rng.standard_normal((1, 1, 4, 4)), bank, 0.2, alpha=1.5,
                     transition=np.eye(2), prev_state=rng.standard_normal(g.shape), mu=mu)
    exact, smooth = state_cost(g, p), smoothed_state_cost(g, p)
    # Huber(t) lies in [|t| - mu/2, |t|]
    assert smooth <= exact + 1e-12
    assert smooth >= exact - 0.5 * 1.5 * mu / 2 * g.size - 1e-12


def test_smooth_gradient_matches_finite_differences(rng):
    bank = random_bank(rng, q=2, c=2)
    p = StateProblem(rng.standard_normal((1, 2, 4, 4)), bank, 0.3, alpha=0.8,
                     transition=rng.standard_normal((2, 2)), prev_state=rng.standard_normal((1, 2, 4, 4)), mu=0.5)
    g = rng.standard_normal((1, 2, 4, 4))

    def smooth(v):
        lam_part = 0.5 * np.sum(p.sparsity * np.abs(v))
        return smoothed_state_cost(v, p) - lam_part

    grad = state_smooth_grad(g, p)
    h = 1e-6
    for i in list(np.ndindex(g.shape))[::3]:
        up, down = g.copy(), g.copy()
        up[i] += h
        down[i] -= h
        fd = (smooth(up) - smooth(down)) / (2 * h)
        assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_transition_gradient_is_clamp():
    pi = np.array([-1.0, -0.01, 0.0, 0.02, 3.0])
    out = smoothed_transition_grad(pi, 0.0, 0.05)
    np.testing.assert_allclose(out, [-1.0, -0.2, 0.0, 0.4, 1.0])
    with pytest.raises(ValueError):
        smoothed_transition_grad(pi, 0.0, 0.0)


@pytest.mark.parametrize("seed", range(4))
def test_dense_state_problem_matches_coordinate_descent(seed):
    p = dense_problem(seed)
    phi = p.bank.filters[:, :, 0, 0].T
    oracle = cd_lasso(phi, p.input.ravel(), 0.5 * p.sparsity.ravel())
    for schedule in (PolynomialSchedule(), NesterovSchedule()):
        gamma, idx, report = infer_states(p, schedule, max_iters=5000, tol=0.0, pool=False)
        assert idx is None
        np.testing.assert_allclose(gamma.ravel(), oracle, atol=1e-5)
        assert state_cost(gamma, p) == pytest.approx(state_cost(oracle.reshape(gamma.shape), p), rel=1e-9)


def test_infer_states_pools(rng):
    bank = random_bank(rng, q=3, c=1)
    p = StateProblem(rng.standard_normal((2, 1, 6, 6)), bank, 0.1)
    pooled, idx, report = infer_states(p, max_iters=50)
    assert pooled.shape == (2, 3, 3, 3)
    assert report.solution.shape == (2, 3, 6, 6)
    assert report.cost_trace[-1] < report.cost_trace[0]


def test_temporal_inference_pulls_towards_anchor(rng):
    bank = random_bank(rng, q=2, c=1)
    x = rng.standard_normal((1, 1, 4, 4))
    prev = rng.standard_normal((1, 2, 4, 4))
    loose = StateProblem(x, bank, 0.05, alpha=1e-6, transition=np.eye(2), prev_state=prev)
    tight = StateProblem(x, bank, 0.05, alpha=50.0, transition=np.eye(2), prev_state=prev, mu=0.01)
    g_loose = infer_states(loose, max_iters=2000, pool=False)[0]
    g_tight = infer_states(tight, max_iters=2000, pool=False)[0]
    assert np.abs(g_tight - prev).sum() < np.abs(g_loose - prev).sum()


def test_problem_validation(rng):
    bank = random_bank(rng, q=2, c=1)
    x = np.zeros((1, 1, 4, 4))
    with pytest.raises(ModeError):
        StateProblem(x, bank, 0.1, transition=np.eye(2))
    with pytest.raises(ValueError):
        StateProblem(x, bank, 0.0)
    with pytest.raises(ShapeError):
        StateProblem(np.zeros((1, 2, 4, 4)), bank, 0.1)
    with pytest.raises(ShapeError):
        StateProblem(x, bank, 0.1, transition=np.eye(3), prev_state=np.zeros((1, 2, 4, 4)))
    p = StateProblem(x, bank, 0.1)
    with pytest.raises(ShapeError):
        state_cost(np.zeros((1, 3, 4, 4)), p)
