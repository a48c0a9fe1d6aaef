import json

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from cmsid.excitation import ExcitationSpec, build_S, eval_u, eval_v, example_frequencies, example_U1
from cmsid.model import (PolynomialSystem, SimulationDivergence, block_width, check_assumptions,
                         controllability_rank, eval_f, eval_h, load_system, save_system, simulate)


def test_block_width():
    assert block_width(2, 1, 2, 0) == 3
    assert block_width(2, 1, 1, 1) == 2
    assert block_width(3, 2, 1, 1) == 6


def test_example_matrices(system):
    np.testing.assert_array_equal(system.A, np.diag([-1.0, -2.0]))
    np.testing.assert_array_equal(system.B, [[-1.0], [0.0]])
    np.testing.assert_array_equal(system.C, np.diag([-6.0, 3.0]))
    np.testing.assert_array_equal(system.D, np.zeros((2, 1)))
    np.testing.assert_array_equal(system.f_block(2, 0), [[0, 0, -5], [0.3, 3, 0]])
    np.testing.assert_array_equal(system.f_block(1, 1), np.zeros((2, 2)))


def test_eval_f_examples(system):
    np.testing.assert_array_equal(eval_f(system, [0, 0], [0]), [0, 0])
    np.testing.assert_allclose(eval_f(system, [1, 1], [0]), [-6.0, 1.3], atol=1e-15)
    np.testing.assert_array_equal(eval_f(system, [0, 0], [1]), [-1.0, 0.0])


def test_eval_h_examples(system):
    np.testing.assert_array_equal(eval_h(system, [1, 2], [0]), [-6.0, 6.0])
    np.testing.assert_array_equal(eval_h(system, [0, 0], [5]), [0.0, 0.0])
    zero_h = PolynomialSystem(2, 1, 2, 2, {(1, 0): -np.eye(2)}, {})
    np.testing.assert_array_equal(eval_h(zero_h, [3, 4], [1]), [0.0, 0.0])


def test_dimension_errors(system):
    with pytest.raises(ValueError):
        eval_f(system, [1, 2, 3], [0])
    with pytest.raises(ValueError):
        PolynomialSystem(2, 1, 2, 2, {(2, 0): np.zeros((2, 2))})
    with pytest.raises(ValueError):
        PolynomialSystem(2, 1, 2, 2, {(3, 0): np.zeros((2, 4))})


def test_assumptions(system):
    rep = check_assumptions(system, n_bar=3)
    assert rep.hurwitz and rep.observable and rep.extended_controllable and rep.n_upper_bound_ok
    assert rep.linear_controllability_rank == 1
    assert controllability_rank(system.A, system.B) == 1
    unstable = PolynomialSystem(2, 1, 2, 1, {(1, 0): np.eye(2)}, {(1, 0): np.eye(2)})
    assert not check_assumptions(unstable).hurwitz


def test_system_file_round_trip(system, tmp_path):
    path = tmp_path / "sys.json"
    save_system(system, path)
    back = load_system(path)
    for key in [(1, 0), (0, 1), (2, 0)]:
        np.testing.assert_array_equal(back.f_block(*key), system.f_block(*key))
    np.testing.assert_array_equal(back.C, system.C)


def test_system_file_missing_field(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"n": 1, "m": 1, "p": 1, "blocks": []}))
    with pytest.raises(KeyError, match="L"):
        load_system(path)


def test_unforced_decay(system):
    traj = simulate(system, lambda t: np.zeros(1), [0.1, 0.1], 20.0, 1e-2, 0.1)
    assert np.linalg.norm(traj.x[-1]) < 1e-6


def test_scalar_exponential():
    lin = PolynomialSystem(1, 1, 1, 1, {(1, 0): [[-1.0]]}, {(1, 0): [[1.0]]})
    traj = simulate(lin, lambda t: np.zeros(1), [1.0], 1.0, 1e-3, 0.5)
    assert abs(traj.x[-1, 0] - np.exp(-1.0)) < 1e-9


def test_linear_matches_matrix_exponential():
    rng = np.random.default_rng(11)
    A = rng.standard_normal((3, 3)) - 2 * np.eye(3)
    lin = PolynomialSystem(3, 1, 1, 1, {(1, 0): A}, {(1, 0): np.ones((1, 3))})
    x0 = rng.standard_normal(3)
    traj = simulate(lin, lambda t: np.zeros(1), x0, 10.0, 1e-3, 1.0)
    for t, x in zip(traj.t, traj.x):
        np.testing.assert_allclose(x, sla.expm(A * t) @ x0, atol=1e-8)


def test_batched_initial_states(system):
    x0 = np.array([[0.1, 0.2], [-0.3, 0.05]])
    batch = simulate(system, lambda t: np.zeros((2, 1)), x0, 1.0, 1e-2, 0.1)
    single = simulate(system, lambda t: np.zeros(1), x0[1], 1.0, 1e-2, 0.1)
    np.testing.assert_allclose(batch.x[:, 1], single.x, atol=1e-15)


def test_convergence_order(system):
    u = lambda t: np.array([np.sin(2 * t)])
    x0 = [0.5, -0.5]
    ref = simulate(system, u, x0, 2.0, 1e-3, 0.1).x
    errs = [np.abs(simulate(system, u, x0, 2.0, h, 0.1).x - ref).max() for h in (0.05, 0.025)]
    assert np.log2(errs[0] / errs[1]) >= 3.5


def test_step_validation(system):
    with pytest.raises(ValueError):
        simulate(system, lambda t: np.zeros(1), [0, 0], 1.0, 3e-3, 1e-2)
    with pytest.raises(ValueError):
        simulate(system, lambda t: np.zeros(1), [0, 0], 0.0)


def test_divergence_reports_time():
    blowup = PolynomialSystem(1, 1, 1, 2, {(2, 0): [[1.0]]}, {(1, 0): [[1.0]]})
    with pytest.raises(SimulationDivergence) as info:
        simulate(blowup, lambda t: np.zeros(1), [10.0], 5.0, 1e-2, 1e-2)
    assert 0 < info.value.t <= 5.0


def test_long_run_bounded(system):
    spec = ExcitationSpec(example_frequencies(), {1: example_U1()})
    v0 = np.ones(11)
    traj = simulate(system, lambda t: eval_u(spec, eval_v(spec, v0, t)), [0, 0], 1000.0, 2.5e-2, 0.5)
    assert np.all(np.isfinite(traj.x)) and np.abs(traj.x[len(traj.t) // 2 :]).max() < 10


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_eval_f_is_quadratic(x1, x2, u):
    # f(alpha x, alpha u) is quadratic in alpha: a quartic fit has no cubic or quartic part
    from cmsid.model import example_system
    sys = example_system()
    alphas = np.array([-1.0, -0.5, 0.5, 1.0, 1.5])
    vals = np.array([eval_f(sys, a * np.array([x1, x2]), [a * u]) for a in alphas])
    coef = np.polynomial.polynomial.polyfit(alphas, vals, 4)
    assert np.abs(coef[3:]).max() <= 1e-9 * max(1.0, np.abs(vals).max())
