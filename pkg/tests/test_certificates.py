import math
import time

import numpy as np
import pytest
import scipy.integrate
from hypothesis import given, settings, strategies as st

from symswitch.casestudies import ROOM_W, ROOM_X_S, spiral_system
from symswitch.certificates import (beta, build_certificates, compute_mu, gamma_hat, h_point_bound,
                                    h_set_bound, lmi_matrix, max_kappa_hat, pencil_mu, verify_lmi)
from symswitch.model import BoxUnion


def _eig_oracle(A, sigmas, P):
    # independent oracle: whiten with the Cholesky factor and take the largest eigenvalue
    M = P @ A + A.T @ P + sum(s.T @ P @ s for s in sigmas)
    L = np.linalg.cholesky(P)
    Li = np.linalg.inv(L)
    return -np.linalg.eigvalsh(Li @ M @ Li.T).max()


def test_trivial_lmi():
    A, P = -np.eye(3), np.eye(3)
    assert max_kappa_hat(A, [], P) == pytest.approx(2.0)
    assert verify_lmi(A, [], P, 2.0)
    assert not verify_lmi(A, [], P, 2.1)


def test_room_kappa_hat(room):
    t0 = time.perf_counter()
    ks = [max_kappa_hat(md.drift.A, md.diffusion.sigmas, np.eye(6)) for md in room.modes]
    assert time.perf_counter() - t0 < 1.0
    for k in ks:
        assert 0.0072 <= k <= 0.0096
    assert min(ks) == pytest.approx(0.0076, rel=0.05)
    assert all(verify_lmi(md.drift.A, md.diffusion.sigmas, np.eye(6), 0.0076 * 0.99) for md in room.modes[:1])


def test_spiral_kappa(spiral, spiral_certs):
    Ps = [np.diag([2.0, 1.0]), np.diag([1.0, 2.0])]
    for md, P in zip(spiral.modes, Ps):
        kh = max_kappa_hat(md.drift.A, md.diffusion.sigmas, P)
        assert kh == pytest.approx(_eig_oracle(md.drift.A, md.diffusion.sigmas, P), rel=1e-10)
        assert kh / 2 == pytest.approx(0.2498, rel=0.05)
    assert spiral_certs.kappa == pytest.approx(0.2498, rel=0.05)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.randoms(use_true_random=False))
def test_max_kappa_hat_matches_oracle_and_monotone(n, rnd):
    r = np.random.default_rng(rnd.randint(0, 2**31))
    A = r.normal(size=(n, n)) - 3 * n * np.eye(n)
    sig = [0.1 * r.normal(size=(n, n))]
    G = r.normal(size=(n, n))
    P = G @ G.T + n * np.eye(n)
    kh = max_kappa_hat(A, sig, P)
    assert kh == pytest.approx(max(0.0, _eig_oracle(A, sig, P)), rel=1e-8, abs=1e-10)
    if kh > 0:
        assert verify_lmi(A, sig, P, kh * (1 - 1e-9))
        assert verify_lmi(A, sig, P, kh * rnd.random())


def test_unstable_returns_zero():
    assert max_kappa_hat(np.eye(2), [], np.eye(2)) == 0.0


def test_nonsymmetric_P_rejected():
    with pytest.raises(ValueError):
        lmi_matrix(-np.eye(2), [], np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_mu():
    assert abs(pencil_mu([np.diag([2.0, 1.0]), np.diag([1.0, 2.0])], 1.0) - math.sqrt(2)) < 1e-12
    assert pencil_mu([np.eye(3), np.eye(3)], 1.0) == 1.0
    assert pencil_mu([4 * np.eye(2), np.eye(2)], 2.0) == pytest.approx(4.0)


@settings(max_examples=40, deadline=None)
@given(st.randoms(use_true_random=False))
def test_mu_symmetric_under_relabel(rnd):
    r = np.random.default_rng(rnd.randint(0, 2**31))
    Ps = []
    for _ in range(3):
        G = r.normal(size=(2, 2))
        Ps.append(G @ G.T + np.eye(2))
    assert pencil_mu(Ps, 1.0) == pytest.approx(pencil_mu(Ps[::-1], 1.0), rel=1e-12)
    assert pencil_mu(Ps, 1.0) >= 1.0


def test_beta(room_certs):
    c = room_certs.per_mode[0]
    assert beta(3.0, 0.0, c) == 3.0
    assert beta(1.0, 30.0, c) == pytest.approx(math.exp(-c.kappa * 30))
    assert beta(2.0, 7.0, c) == pytest.approx(2 * beta(1.0, 7.0, c))
    with pytest.raises(ValueError):
        beta(-1.0, 1.0, c)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 100), st.floats(0, 500), st.floats(0, 500))
def test_beta_semigroup(r, s1, s2, ):
    from symswitch.casestudies import room_certificates
    c = room_certificates().per_mode[1]
    assert beta(beta(r, s1, c), s2, c) == pytest.approx(beta(r, s1 + s2, c), rel=1e-12, abs=1e-300)


def test_h_closed_vs_quadrature(room, room_certs):
    for p in range(room.m):
        a = h_point_bound(ROOM_X_S, 420.0, p, room_certs, room, "closed")
        b = h_point_bound(ROOM_X_S, 420.0, p, room_certs, room, "quad")
        assert a == pytest.approx(b, rel=1e-10)


def test_h_degenerate(spiral, spiral_certs):
    assert h_point_bound([1.0, 2.0], 0.0, 0, spiral_certs, spiral) == 0.0
    assert h_point_bound([0.0, 0.0], 3.0, 0, spiral_certs, spiral) == 0.0
    small = h_point_bound([1.0, 2.0], 1e-6, 0, spiral_certs, spiral)
    assert small < 1e-8
    assert h_point_bound([1.0, 2.0], 5e-7, 0, spiral_certs, spiral) == pytest.approx(small / 2, rel=1e-5)
    assert h_point_bound([1.0, 2.0], 1e6, 0, spiral_certs, spiral) < 1e-12
    quiet = spiral_system(sigma=0.0)
    c = build_certificates(quiet, [np.diag([2.0, 1.0]), np.diag([1.0, 2.0])])
    assert h_point_bound([3.0, 3.0], 2.0, 1, c, quiet) == 0.0
    with pytest.raises(ValueError):
        h_point_bound([1.0, 1.0], -1.0, 0, spiral_certs, spiral)


def test_h_set_bound(room, room_certs):
    X = ROOM_W
    v = h_set_bound(X, 30.0, room_certs, room)
    assert 0 < v < 1.0
    small = BoxUnion(ROOM_W.lo, ROOM_W.hi - 5)
    assert h_set_bound(small, 30.0, room_certs, room) <= v
    with pytest.raises(ValueError):
        h_set_bound(BoxUnion.empty(6), 30.0, room_certs, room)


def test_h_set_bound_reference_value(room, room_certs):
    # closed form by hand: 0.5 * 1 * 6 * 0.003^2 * e^{-k t} * 22^2 * (1/(2k)) * (1 - e^{-2 k t})
    k = room_certs.per_mode[1].kappa
    t = 30.0
    ref = 0.5 * 6 * 0.003 ** 2 * math.exp(-k * t) * 22.0 ** 2 / (2 * k) * (1 - math.exp(-2 * k * t))
    assert h_set_bound(ROOM_W, t, room_certs, room) == pytest.approx(ref, rel=1e-12)


def test_gamma_hat(room_certs, spiral_certs):
    assert gamma_hat(0.0, room_certs) == 0.0
    assert gamma_hat(2.5, room_certs) == 2.5
    assert gamma_hat(1.0, spiral_certs) == pytest.approx(2.0)
    assert gamma_hat(0.3 + 0.4, spiral_certs) == pytest.approx(gamma_hat(0.3, spiral_certs) + gamma_hat(0.4, spiral_certs))
    with pytest.raises(ValueError):
        gamma_hat(-1.0, room_certs)


def test_envelopes_bracket_norm(rng, spiral_certs):
    # c_lo |d|_inf <= V <= c_hi |d|_inf for the computed envelopes
    for c in spiral_certs.per_mode:
        d = rng.normal(size=(1000, 2))
        v = c.V(d, np.zeros(2))
        nrm = np.max(np.abs(d), axis=1)
        assert np.all(c.alpha_lo_coeff * nrm <= v * (1 + 1e-12))
        assert np.all(v <= c.alpha_hi_coeff * nrm * (1 + 1e-12))


def test_provenance(room_certs):
    assert room_certs.provenance["kappa"] == ["computed"] * 3
    assert room_certs.provenance["alpha_lo"] == ["user"] * 3
    assert room_certs.common and room_certs.mu == 1.0
