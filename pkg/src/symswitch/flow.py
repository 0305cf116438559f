"""Nominal flows (fixed-step RK4) and Euler-Maruyama sample paths.

Random increments come from counter-based Philox streams. Trajectories are
grouped in fixed blocks of ``NOISE_BLOCK``; the stream for a block is keyed
by (seed, block index) and is always drawn at full block width, so the path
of trajectory ``i`` depends only on ``(seed, i)``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .model import Affine, ModeDynamics, SwitchedSystem

NOISE_BLOCK = 512


class FlowError(FloatingPointError):
    """Nonfinite state encountered while integrating."""


@dataclass(frozen=True)
class FlowConfig:
    ode_substeps_per_tau: int = 64
    sde_substeps_per_tau: int = 100
    rng_scheme: str = "philox-block512"

    def __post_init__(self):
        if self.ode_substeps_per_tau < 1 or self.sde_substeps_per_tau < 1:
            raise ValueError("substeps must be >= 1")


DEFAULT_FLOW = FlowConfig()


# ------------------------------------------------------------ matrix exponential

def expm_series(M: np.ndarray, tol: float = 1e-18, max_terms: int = 60) -> np.ndarray:
    """Matrix exponential by scaling and squaring around a truncated Taylor series."""
    M = np.asarray(M, dtype=float)
    norm = np.linalg.norm(M, 1)
    s = max(0, int(math.ceil(math.log2(norm / 0.5))) if norm > 0.5 else 0)
    X = M / (2 ** s)
    E = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, max_terms):
        term = term @ X / k
        E = E + term
        if np.abs(term).max() <= tol * max(1.0, np.abs(E).max()):
            break
    for _ in range(s):
        E = E @ E
    return E


def affine_flow_exact(A, b, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """(Phi, phi) with x(tau) = Phi x + phi, from the augmented exponential."""
    A, b = np.asarray(A, float), np.asarray(b, float)
    n = A.shape[0]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = A
    aug[:n, n] = b
    E = expm_series(aug * tau)
    return E[:n, :n], E[:n, n]


def rk4_affine_map(A, b, tau: float, substeps: int) -> tuple[np.ndarray, np.ndarray]:
    """The affine map realized by ``substeps`` RK4 steps of x' = A x + b."""
    A, b = np.asarray(A, float), np.asarray(b, float)
    n = A.shape[0]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = A
    aug[:n, n] = b
    h = tau / substeps
    Mh = aug * h
    M2 = Mh @ Mh
    step = np.eye(n + 1) + Mh + M2 / 2 + M2 @ Mh / 6 + M2 @ M2 / 24
    T = np.linalg.matrix_power(step, substeps)
    return T[:n, :n], T[:n, n]


@lru_cache(maxsize=256)
def _cached_affine_map(Abytes: bytes, bbytes: bytes, n: int, tau: float, substeps: int):
    A = np.frombuffer(Abytes).reshape(n, n)
    b = np.frombuffer(bbytes)
    Phi, phi = rk4_affine_map(A, b, tau, substeps)
    Phi.setflags(write=False)
    phi.setflags(write=False)
    return Phi, phi


def mode_flow_map(mode: ModeDynamics, tau: float, cfg: FlowConfig = DEFAULT_FLOW):
    """Cached RK4 affine map for an affine mode."""
    A, b = mode.drift.A, mode.drift.b
    return _cached_affine_map(np.ascontiguousarray(A).tobytes(), np.ascontiguousarray(b).tobytes(),
                              A.shape[0], float(tau), int(cfg.ode_substeps_per_tau))


def _rk4(f: Callable, x: np.ndarray, tau: float, substeps: int) -> np.ndarray:
    h = tau / substeps
    for _ in range(substeps):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def nominal_flow(x, p: int, tau: float, sys: SwitchedSystem,
                 cfg: FlowConfig = DEFAULT_FLOW) -> np.ndarray:
    """RK4 approximation of the noise-free flow of mode ``p`` (0-based) for time tau.

    ``x`` may be a single state or a batch of shape (..., n).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    mode = sys.modes[p]
    x = np.asarray(x, dtype=float)
    if isinstance(mode.drift, Affine):
        Phi, phi = mode_flow_map(mode, tau, cfg)
        y = x @ Phi.T + phi
    else:
        y = _rk4(mode.f, x, tau, cfg.ode_substeps_per_tau)
    if not np.all(np.isfinite(y)):
        raise FlowError(f"nonfinite state in mode {p + 1} flow")
    return y


def nominal_flow_exact(x, p: int, tau: float, sys: SwitchedSystem) -> np.ndarray:
    """Matrix-exponential reference flow (affine modes only)."""
    mode = sys.modes[p]
    Phi, phi = affine_flow_exact(mode.drift.A, mode.drift.b, tau)
    return np.asarray(x, float) @ Phi.T + phi


def flow_sequence(x, modes: Sequence[int], tau: float, sys: SwitchedSystem,
                  cfg: FlowConfig = DEFAULT_FLOW) -> np.ndarray:
    for p in modes:
        x = nominal_flow(x, p, tau, sys, cfg)
    return x


# ------------------------------------------------------------------- noise

class NoiseBlock:
    """Gaussian increments for one block of NOISE_BLOCK trajectories."""

    def __init__(self, seed: int, block: int, q_hat: int):
        self.gen = np.random.Generator(np.random.Philox(key=np.array([seed, block], dtype=np.uint64)))
        self.q_hat = q_hat

    def period(self, substeps: int, dt: float) -> np.ndarray:
        """(substeps, NOISE_BLOCK, q_hat) Brownian increments with variance dt."""
        return self.gen.standard_normal((substeps, NOISE_BLOCK, self.q_hat)) * math.sqrt(dt)


def em_period(sys: SwitchedSystem, X: np.ndarray, modes: np.ndarray, tau: float,
              dW: np.ndarray) -> np.ndarray:
    """Advance a batch by one sampling period with Euler-Maruyama.

    ``modes`` gives one 0-based mode per row; ``dW`` has shape
    (substeps, rows, q_hat). Every mode's increment is computed on the full
    batch so that floating point results do not depend on the mode mix.
    """
    substeps = dW.shape[0]
    dt = tau / substeps
    modes = np.asarray(modes)
    uniform = modes.size and np.all(modes == modes.flat[0])
    used = [int(modes.flat[0])] if uniform else list(range(sys.m))
    for k in range(substeps):
        if uniform:
            md = sys.modes[used[0]]
            X = X + (md.f(X) * dt + md.g_dw(X, dW[k]))
        else:
            inc = np.zeros_like(X)
            for p in used:
                md = sys.modes[p]
                sel = (modes == p)[:, None]
                inc = np.where(sel, md.f(X) * dt + md.g_dw(X, dW[k]), inc)
            X = X + inc
    if not np.all(np.isfinite(X)):
        raise FlowError("nonfinite state in Euler-Maruyama step")
    return X


def blocks_for(runs: int) -> int:
    return (runs + NOISE_BLOCK - 1) // NOISE_BLOCK


def run_blocks(worker: Callable[[int], object], num_blocks: int, threads: int = 1) -> list:
    """Evaluate ``worker(block)`` for every block; results kept in block order."""
    if threads <= 1 or num_blocks <= 1:
        return [worker(b) for b in range(num_blocks)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, range(num_blocks)))


def simulate_open_loop(sys: SwitchedSystem, x0, switching: Sequence[int], tau: float,
                       runs: int, seed: int, cfg: FlowConfig = DEFAULT_FLOW,
                       threads: int = 1, first_run: int = 0) -> np.ndarray:
    """Sample paths under a fixed switching sequence.

    Returns states at the sampling instants, shape (runs, k + 1, n), for
    trajectories ``first_run .. first_run + runs - 1``.
    """
    switching = [int(p) for p in switching]
    x0 = np.asarray(x0, dtype=float)
    sub = cfg.sde_substeps_per_tau
    first_block = first_run // NOISE_BLOCK
    last_block = (first_run + runs - 1) // NOISE_BLOCK

    def worker(j):
        block = first_block + j
        nb = NoiseBlock(seed, block, sys.q_hat)
        X = np.broadcast_to(x0, (NOISE_BLOCK, sys.n)).copy()
        out = np.empty((NOISE_BLOCK, len(switching) + 1, sys.n))
        out[:, 0] = X
        for k, p in enumerate(switching):
            X = em_period(sys, X, np.full(NOISE_BLOCK, p), tau, nb.period(sub, tau / sub))
            out[:, k + 1] = X
        return out

    parts = run_blocks(worker, last_block - first_block + 1, threads)
    allp = np.concatenate(parts, axis=0)
    start = first_run - first_block * NOISE_BLOCK
    return allp[start:start + runs]


def sde_sample_path(x0, switching: Sequence[int], T: float, tau: float, sys: SwitchedSystem,
                    seed: int, cfg: FlowConfig = DEFAULT_FLOW, trajectory: int = 0) -> np.ndarray:
    """One Euler-Maruyama path sampled at multiples of tau up to T = k tau."""
    k = int(round(T / tau))
    if abs(k * tau - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be a multiple of tau")
    if len(switching) < k:
        raise ValueError("switching sequence shorter than the horizon")
    return simulate_open_loop(sys, x0, switching[:k], tau, 1, seed, cfg, first_run=trajectory)[0]


def path_to_csv(path: np.ndarray, tau: float) -> str:
    n = path.shape[1]
    lines = ["t," + ",".join(f"x{i + 1}" for i in range(n))]
    for k, x in enumerate(path):
        lines.append(",".join([f"{k * tau:.17g}"] + [f"{v:.17g}" for v in x]))
    return "\n".join(lines) + "\n"
