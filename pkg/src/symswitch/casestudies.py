"""Builders for the two bundled example systems.

``room_system``: six-room building, three heater modes (off / heater in
room 1 / heater in room 4), multiplicative noise per room.

``spiral_system``: planar two-mode affine system with distinct equilibria
(-1, 0) and (1, 0), multiplicative noise, dwell time 2.
"""
from __future__ import annotations

import numpy as np

from .certificates import CertificateSet, build_certificates
from .model import BoxUnion, ModeDynamics, SwitchedSystem

ROOM_X_S = np.array([18.0, 17.72, 17.72, 18.0, 17.46, 17.46])
ROOM_W = BoxUnion.box([11.7] * 6, [22.0] * 6)
ROOM_TARGET = BoxUnion.box([19.0] * 6, [22.0] * 6)
ROOM_X0 = np.full(6, 11.7)

SPIRAL_D = BoxUnion.box([-5.0, -4.0], [5.0, 4.0])
SPIRAL_Z = BoxUnion.box([-1.5, -1.0], [1.5, 1.0])
SPIRAL_X0 = np.array([-4.0, -3.8])


def room_matrices():
    n = 6
    edges = [(1, 2), (1, 3), (2, 4), (3, 4), (1, 5), (4, 6)]
    a = 5e-2
    ae = np.array([5e-3, 3.3e-3, 3.3e-3, 5e-3, 3.3e-3, 3.3e-3])
    af, Te, Tf = 3.6e-3, 10.0, 100.0
    L = np.zeros((n, n))
    for i, j in edges:
        L[i - 1, j - 1] += a
        L[j - 1, i - 1] += a
    base = L - np.diag(L.sum(axis=1)) - np.diag(ae)
    b0 = ae * Te
    As, bs = [], []
    for heater in (None, 0, 3):
        A, b = base.copy(), b0.copy()
        if heater is not None:
            A[heater, heater] -= af
            b[heater] += af * Tf
        As.append(A)
        bs.append(b)
    return As, bs


def room_system() -> SwitchedSystem:
    As, bs = room_matrices()
    modes = []
    for p, (A, b) in enumerate(zip(As, bs)):
        s = 0.002 if p == 0 else 0.003
        sigmas = np.zeros((6, 6, 6))
        for i in range(6):
            sigmas[i, i, i] = s
        modes.append(ModeDynamics.affine(A, b, sigmas))
    return SwitchedSystem(6, 6, tuple(modes), ROOM_W, None, "six-room building")


def room_certificates(sys: SwitchedSystem = None, literal: bool = True) -> CertificateSet:
    """P = I, q = 1. ``literal`` uses unit envelopes and unit gamma slope."""
    sys = sys or room_system()
    if literal:
        return build_certificates(sys, [np.eye(6)], 1.0, alpha_lo=1.0, alpha_hi=1.0,
                                  gamma_hat_slope=1.0)
    return build_certificates(sys, [np.eye(6)], 1.0)


def spiral_system(sigma: float = 0.01) -> SwitchedSystem:
    modes = []
    for p in (1, 2):
        sgn = (-1) ** p
        A = np.array([[-0.25, float(p)], [float(p - 3), -0.25]])
        b = np.array([sgn * 0.25, sgn * (3 - p)])
        sigmas = np.zeros((2, 2, 2))
        sigmas[0, 0, 0] = sigma
        sigmas[1, 1, 1] = sigma
        modes.append(ModeDynamics.affine(A, b, sigmas))
    return SwitchedSystem(2, 2, tuple(modes), SPIRAL_D, 2.0, "planar two-mode spiral")


def spiral_certificates(sys: SwitchedSystem = None) -> CertificateSet:
    sys = sys or spiral_system()
    return build_certificates(sys, [np.diag([2.0, 1.0]), np.diag([1.0, 2.0])], 1.0)
