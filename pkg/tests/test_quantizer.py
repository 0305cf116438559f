import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from symswitch.casestudies import ROOM_W, ROOM_X_S, SPIRAL_D, spiral_system
from symswitch.certificates import build_certificates
from symswitch.model import BoxUnion, ModeDynamics, SwitchedSystem
from symswitch.quantizer import (GridParams, InfeasibleError, SeqParams, certified_epsilon_grid,
                                 certified_epsilon_sequence, compare_approaches, delta_sequence,
                                 dwell_factor, dwell_steps_for, eta_bar_analytic, grid_count_estimate,
                                 grid_inequalities, min_epsilon_grid, selection_criterion, seq_count,
                                 sequence_inequality, solve_eta, solve_horizon_N)


def test_param_validation():
    with pytest.raises(ValueError):
        GridParams(0.0, 0.1, 1.0)
    with pytest.raises(ValueError):
        SeqParams(1.0, 0, (0.0,), 1.0)


def test_dwell_steps(spiral):
    assert dwell_steps_for(spiral, 0.5) == 4
    with pytest.raises(ValueError):
        dwell_steps_for(spiral, 0.3)


def test_dwell_too_short(spiral_certs):
    with pytest.raises(InfeasibleError, match="dwell time too short"):
        dwell_factor(spiral_certs, 0.5 * math.log(math.sqrt(2)) / spiral_certs.kappa)


def test_zero_diffusion_min_epsilon_is_zero():
    sys = spiral_system(sigma=0.0)
    c = build_certificates(sys, [np.diag([2.0, 1.0]), np.diag([1.0, 2.0])])
    assert min_epsilon_grid(0.5, c, sys, SPIRAL_D, 2.0) == 0.0


def test_min_epsilon_monotone_in_tau(room, room_certs):
    taus = np.linspace(5, 120, 24)
    vals = [min_epsilon_grid(t, room_certs, room, ROOM_W) for t in taus]
    assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))


def test_solve_eta_round_trip(room, room_certs, spiral, spiral_certs):
    for sys, certs, tau, eps, dw in [(room, room_certs, 30.0, 2.8, None), (room, room_certs, 30.0, 4.0, None),
                                     (spiral, spiral_certs, 0.5, 1.2, 2.0), (spiral, spiral_certs, 0.5, 3.0, 2.0)]:
        r = solve_eta(tau, eps, certs, sys, sys.domain, dw)
        assert all(i.holds for i in r.inequalities)
        worse = grid_inequalities(tau, r.eta * (1 + 1e-9) + 1e-12, eps, certs, sys, sys.domain, dw)
        assert not all(i.holds for i in worse) or r.binding == "domain span"
        assert certified_epsilon_grid(tau, r.eta, certs, sys, sys.domain, dw) <= eps * (1 + 1e-9)


def test_solve_eta_infeasible_below_lower_bound(room, room_certs):
    e = min_epsilon_grid(30.0, room_certs, room, ROOM_W)
    with pytest.raises(InfeasibleError, match="lower bound"):
        solve_eta(30.0, 0.9 * e, room_certs, room, ROOM_W)


def test_eta_bar_scaling(room, room_certs):
    a = eta_bar_analytic(13, 30.0, ROOM_X_S, room_certs, room)
    b = eta_bar_analytic(14, 30.0, ROOM_X_S, room_certs, room)
    assert b / a == pytest.approx(math.exp(-room_certs.kappa * 30.0), rel=1e-12)


def test_eta_bar_at_common_equilibrium():
    md = [ModeDynamics.affine(-np.eye(2) * k, np.zeros(2), [0.01 * np.eye(2)]) for k in (1.0, 2.0)]
    sys = SwitchedSystem(2, 1, tuple(md), BoxUnion.box([-1, -1], [1, 1]))
    c = build_certificates(sys, [np.eye(2)])
    assert eta_bar_analytic(3, 0.5, [0.0, 0.0], c, sys) == 0.0


def test_solve_horizon_minimal(room, room_certs, spiral, spiral_certs):
    for sys, certs, tau, eps, x_s, dw in [(room, room_certs, 30.0, 1.0, ROOM_X_S, None),
                                          (room, room_certs, 30.0, 3.0, ROOM_X_S, None),
                                          (spiral, spiral_certs, 0.5, 10.0, [0.0, 0.0], 2.0)]:
        r = solve_horizon_N(tau, eps, x_s, certs, sys, dw)
        assert r.inequality.holds
        if r.N > 1:
            assert not sequence_inequality(r.N - 1, tau, eps, x_s, certs, sys, dw).holds
        assert certified_epsilon_sequence(r.N, tau, x_s, certs, sys, dw) <= eps * (1 + 1e-9)


def test_huge_epsilon_gives_N1(room, room_certs):
    assert solve_horizon_N(30.0, 1e6, ROOM_X_S, room_certs, room).N == 1


def test_horizon_infeasible_reports(room, room_certs):
    with pytest.raises(InfeasibleError, match="no N <= 5"):
        solve_horizon_N(30.0, 1.0, ROOM_X_S, room_certs, room, n_max=5)


def test_delta_zero_disturbance(spiral_certs):
    d = delta_sequence(1.2, 0.5, 4, 0.0, spiral_certs)
    d0 = spiral_certs.alpha_lo(1.2)
    assert np.allclose(d.values, d0 * np.exp(-np.arange(5) * spiral_certs.kappa * 0.5), rtol=1e-14)


def test_delta_small_rate_limit():
    class C:
        q, kappa, mu = 1.0, 1e-12, 1.0

        def alpha_lo(self, y):
            return y
    d = delta_sequence(1.0, 1.0, 5, 0.1, C())
    assert np.allclose(d.values, 1.0 + 0.1 * np.arange(6), rtol=1e-9)
    assert np.allclose(d.closed_form, d.values, rtol=1e-9)
    assert not d.feasible


def test_delta_spiral_parameters(spiral, spiral_certs):
    r = solve_eta(0.5, 1.2, spiral_certs, spiral, SPIRAL_D, 2.0)
    dist = spiral_certs.gamma_hat_slope * (r.h + r.eta)
    d = delta_sequence(1.2, 0.5, 4, dist, spiral_certs)
    assert np.allclose(d.closed_form, d.values, rtol=1e-12, atol=0)
    assert d.feasible


def test_delta_closed_form_random_draws():
    class C:
        q = 1.0

        def __init__(self, k, mu):
            self.kappa, self.mu = k, mu

        def alpha_lo(self, y):
            return 1.7 * y
    r = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        c = C(float(r.uniform(1e-4, 2.0)), float(r.uniform(1.0, 3.0)))
        d = delta_sequence(float(r.uniform(0.1, 5)), float(r.uniform(0.01, 2)), int(r.integers(1, 30)),
                           float(r.uniform(0, 1)), c)
        worst = max(worst, float(np.max(np.abs(d.values - d.closed_form) / np.abs(d.closed_form))))
    assert worst <= 1e-12


def test_counts():
    assert seq_count(3, 13) == 1_594_323
    assert seq_count(2, 22, 4) == 4 * 2 ** 22
    assert grid_count_estimate(ROOM_W, 0.02) == pytest.approx(1.8657e16, rel=1e-3)
    assert grid_count_estimate(SPIRAL_D, 0.0083, 2, 4) == pytest.approx(9_310_320, rel=0.01)


def test_single_mode_criterion():
    md = ModeDynamics.affine(-np.eye(2), np.zeros(2), [0.01 * np.eye(2)])
    sys = SwitchedSystem(2, 1, (md,), BoxUnion.box([-1, -1], [1, 1]))
    c = build_certificates(sys, [np.eye(2)])
    assert selection_criterion(1, 2, 0.5, c) <= 1
    rep = compare_approaches(sys, c, 0.5, 0.5, x_s=[0.0, 0.0])
    assert rep["criterion_holds"] and rep["recommendation"] == "sequence"


def test_compare_room(room, room_certs):
    rep = compare_approaches(room, room_certs, 30.0, 1.0, ROOM_W, ROOM_X_S)
    assert rep["grid_count_estimate"] is None and "grid_infeasible" in rep
    assert rep["recommendation"] == "sequence"
