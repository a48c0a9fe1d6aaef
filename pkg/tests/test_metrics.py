import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmsid.metrics import (DB_FLOOR, AlignmentError, LinearMapTransfer, bode_data, cf_align,
                           entry_transfers, error_ratio, hinf_norm, quadratic_frame_change,
                           transfer_entry, write_bode_csv)


def first_order(gain, pole):
    return LinearMapTransfer([[gain]], [[-pole]], [[1.0]])


@pytest.fixture
def true_entries(system):
    return entry_transfers(system.C, system.A, system.B, system.f_block(2, 0))


def test_transfer_entry_dc(true_entries):
    assert transfer_entry(true_entries["G111"], 0.0) == pytest.approx(6.0)
    assert transfer_entry(true_entries["G213"], 0.0) == pytest.approx(30.0)
    assert transfer_entry(true_entries["G221"], 0.0) == pytest.approx(0.45)
    assert transfer_entry(true_entries["G222"], 0.0) == pytest.approx(4.5)


def test_transfer_entry_matches_closed_form(true_entries):
    w = np.logspace(-2, 2, 50)
    np.testing.assert_allclose(transfer_entry(true_entries["G111"], w), 6 / (1j * w + 1), rtol=1e-13)
    np.testing.assert_allclose(transfer_entry(true_entries["G222"], w), 9 / (1j * w + 2), rtol=1e-13)
    np.testing.assert_allclose(transfer_entry(true_entries["G213"], w), 30 / (1j * w + 1), rtol=1e-13)


def test_bode_first_order():
    d = bode_data(first_order(6.0, 1.0), [0.0, 1.0])
    assert d["mag_db"][0] == pytest.approx(20 * np.log10(6.0))
    assert d["mag_db"][0] == pytest.approx(15.563, abs=1e-3)
    assert d["mag_db"][1] == pytest.approx(20 * np.log10(6 / np.sqrt(2)))
    assert d["phase_deg"][1] == pytest.approx(-45.0)


def test_bode_zero_entry():
    d = bode_data(LinearMapTransfer([[1.0]], [[-1.0]], [[0.0]]), np.logspace(-1, 1, 5))
    np.testing.assert_array_equal(d["mag_db"], DB_FLOOR)


def test_hinf_norms(true_entries):
    assert hinf_norm(true_entries["G111"]) == pytest.approx(6.0, rel=1e-9)
    assert hinf_norm(true_entries["G222"]) == pytest.approx(4.5, rel=1e-9)
    assert hinf_norm(true_entries["G221"]) == pytest.approx(0.45, rel=1e-9)
    assert hinf_norm(LinearMapTransfer([[1.0]], [[-1.0]], [[0.0]])) == 0.0


def test_hinf_resonant_peak():
    # lightly damped second order: peak 1 / (2 zeta sqrt(1 - zeta^2)) at w_n sqrt(1 - 2 zeta^2)
    wn, z = 3.0, 0.05
    tm = LinearMapTransfer([[wn**2, 0.0]], [[0, 1], [-wn**2, -2 * z * wn]], [[0.0], [1.0]])
    assert hinf_norm(tm) == pytest.approx(1 / (2 * z * np.sqrt(1 - z**2)), rel=1e-6)


def test_hinf_requires_stability():
    with pytest.raises(ValueError):
        hinf_norm(LinearMapTransfer([[1.0]], [[1.0]], [[1.0]]))


def test_error_ratio():
    g = first_order(6.0, 1.0)
    assert error_ratio(g, g) == 0.0
    assert error_ratio(g, LinearMapTransfer([[0.0]], [[-1.0]], [[1.0]])) == pytest.approx(1.0)
    assert error_ratio(g, first_order(6.6, 1.0)) == pytest.approx(0.1, rel=1e-9)
    with pytest.raises(ZeroDivisionError):
        error_ratio(LinearMapTransfer([[0.0]], [[-1.0]], [[1.0]]), g)


def test_cf_align_identity(system):
    al = cf_align(system.C, system.A, system.C, system.A, system.B, system.f_block(2, 0))
    np.testing.assert_allclose(al.T, np.eye(2), atol=1e-14)
    np.testing.assert_allclose(al.F20, system.f_block(2, 0), atol=1e-14)


def test_cf_align_idempotent(system):
    rng = np.random.default_rng(1)
    T = rng.standard_normal((2, 2)) + 2 * np.eye(2)
    Ti = np.linalg.inv(T)
    first = cf_align(system.C, system.A, system.C @ T, Ti @ system.A @ T, Ti @ system.B,
                     quadratic_frame_change(system.f_block(2, 0), Ti, T))
    again = cf_align(system.C, system.A, first.C, first.A, first.B, first.F20)
    assert np.linalg.norm(again.T - np.eye(2)) <= 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cf_align_recovers_random_frames(seed):
    from cmsid.model import example_system
    sys = example_system()
    rng = np.random.default_rng(seed)
    T = rng.standard_normal((2, 2))
    if np.linalg.cond(T) > 1e3:
        T += 3 * np.eye(2)
    Ti = np.linalg.inv(T)
    F = sys.f_block(2, 0)
    al = cf_align(sys.C, sys.A, sys.C @ T, Ti @ sys.A @ T, Ti @ sys.B, quadratic_frame_change(F, Ti, T))
    for est, true in ((al.A, sys.A), (al.B, sys.B), (al.C, sys.C), (al.F20, F)):
        assert np.linalg.norm(est - true) <= 1e-8 * np.linalg.norm(true)
    # the linear transfer is invariant under the change of frame
    w = np.logspace(-2, 2, 25)
    g = transfer_entry(LinearMapTransfer(sys.C, sys.A, sys.B), w)
    gh = transfer_entry(LinearMapTransfer(sys.C @ T, Ti @ sys.A @ T, Ti @ sys.B), w)
    assert np.abs(g - gh).max() <= 1e-10 * np.abs(g).max()


def test_quadratic_frame_change_matches_monomials(system):
    # x = T z  =>  F20 m2(x) expressed in z coordinates, checked pointwise
    from cmsid.kron import reduced_power
    rng = np.random.default_rng(3)
    T = rng.standard_normal((2, 2)) + 2 * np.eye(2)
    F = system.f_block(2, 0)
    Fz = quadratic_frame_change(F, np.linalg.inv(T), T)  # vector field of z = T^-1 x
    for _ in range(5):
        z = rng.standard_normal(2)
        np.testing.assert_allclose(Fz @ reduced_power(z, 2), np.linalg.solve(T, F @ reduced_power(T @ z, 2)),
                                   atol=1e-12)


def test_cf_align_errors(system):
    with pytest.raises(AlignmentError):
        cf_align(system.C, system.A, np.ones((2, 3)), -np.eye(3), np.ones((3, 1)), np.zeros((3, 6)))
    with pytest.raises(AlignmentError):
        # an unobservable pair makes the similarity singular
        cf_align(system.C, system.A, np.array([[1.0, 0.0], [2.0, 0.0]]), np.diag([-1.0, -2.0]),
                 system.B, system.f_block(2, 0))


def test_write_bode_csv(tmp_path):
    w = np.array([0.1, 1.0])
    path = tmp_path / "b" / "g.csv"
    write_bode_csv(path, {"true": bode_data(first_order(6, 1), w), "est": bode_data(first_order(6, 1), w)})
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["omega_rad_s", "mag_db", "phase_deg", "series_label"]
    assert len(rows) == 5 and {r[3] for r in rows[1:]} == {"true", "est"}
    assert float(rows[2][0]) == 1.0
