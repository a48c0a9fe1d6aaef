"""Shared fixtures: the bundled example, its exact harmonics and identified models."""
from __future__ import annotations

import warnings

import numpy as np
import pytest
import scipy.linalg as sla

from cmsid import cm, harness
from cmsid.excitation import build_S
from cmsid.model import example_system


@pytest.fixture(scope="session")
def system():
    return example_system()


@pytest.fixture(scope="session")
def config():
    return harness.load_config()


@pytest.fixture(scope="session")
def S(config):
    return build_S(config.excitation)


@pytest.fixture(scope="session")
def exact_hd(config):
    return harness.noiseless_harmonics(config)


@pytest.fixture(scope="session")
def models(exact_hd, S, config):
    """Noise-free Methods I and II in the default (frequency-scaled) frame."""
    return cm.identify(exact_hd, S, config.pipeline, methods=("I", "II"))


@pytest.fixture(scope="session")
def display_models(exact_hd, S):
    """Noise-free Method I without frequency scaling (the reference display frame)."""
    cfg = cm.PipelineConfig(frequency_scale=None)
    return cm.identify(exact_hd, S, cfg, methods=("I",))


def random_sylvester(rng, n0=None, m0=None, p0=None, q=None, alpha=1, with_D=False):
    """Noiseless Sylvester data ``X S - A X = B U``, ``Y = C X + D U`` from a random system."""
    # keep the stacked data informative: (m0 + p0)(n0 + 1) <= alpha + 2q with q <= 6
    n0 = n0 or int(rng.integers(1, 5))
    while True:
        m_try = m0 or int(rng.integers(1, 3))
        p_try = p0 or int(rng.integers(1, 3))
        if (m_try + p_try) * (n0 + 1) <= alpha + 12 or (m0 and p0):
            m0, p0 = m_try, p_try
            break
    q = q or int(rng.integers(max(1, -(-((m0 + p0) * (n0 + 1) - alpha) // 2)), 7))
    while True:
        A = rng.standard_normal((n0, n0))
        A -= (np.max(np.linalg.eigvals(A).real) + rng.uniform(0.3, 2.0)) * np.eye(n0)
        C = rng.standard_normal((p0, n0))
        obs = np.vstack([C @ np.linalg.matrix_power(A, k) for k in range(n0)])
        B = rng.standard_normal((n0, m0))
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n0)])
        if np.linalg.matrix_rank(obs) == n0 and np.linalg.matrix_rank(ctrb) == n0:
            break
    D = rng.standard_normal((p0, m0)) if with_D else np.zeros((p0, m0))
    w = np.sort(rng.uniform(0.1, 10.0, q))
    sigma0 = alpha + 2 * q
    S = np.zeros((sigma0, sigma0))
    for k, om in enumerate(w):
        a = alpha + 2 * k
        S[a, a + 1], S[a + 1, a] = om, -om
    U = rng.standard_normal((m0, sigma0))
    X = sla.solve_sylvester(-A, S, B @ U)
    return dict(A=A, B=B, C=C, D=D, S=S, U=U, X=X, Y=C @ X + D @ U, n0=n0)


def mimo_hinf_ratio(true, est, w=None):
    """Grid sup of ``sigma_max(G - G_hat)`` over sup of ``sigma_max(G)``."""
    w = np.concatenate([[0.0], np.logspace(-3, 3, 3000)]) if w is None else w

    def resp(sys_, s):
        A, B, C, D = sys_
        return C @ np.linalg.solve(s * np.eye(A.shape[0]) - A, B) + D

    num = den = 0.0
    for om in w:
        g, gh = resp(true, 1j * om), resp(est, 1j * om)
        num = max(num, np.linalg.norm(g - gh, 2))
        den = max(den, np.linalg.norm(g, 2))
    return num / den


@pytest.fixture(autouse=True)
def _quiet_gap_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="no clear singular-value gap")
        yield


@pytest.fixture(scope="session")
def sim_data(config):
    """Noise-free desk-scale records of the example (100 records x 100 samples)."""
    return harness.simulate_records(config)


@pytest.fixture(scope="session")
def zero_noise_demo(tmp_path_factory):
    """``cmsid demo`` with zero noise and one run: (exit code, output dir, seconds)."""
    import time
    from cmsid import cli
    out = tmp_path_factory.mktemp("demo0")
    t0 = time.perf_counter()
    code = cli.main(["demo", "--out", str(out), "--override", "noise.variance=0",
                     "--override", "montecarlo.runs=1"])
    return code, out, time.perf_counter() - t0


#: "PASS/FAIL criterion ..." lines collected by the acceptance suite.
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
