"""Monte Carlo checks of closed-loop behaviour, empirical defect estimates and sample sizes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .abstraction import DISABLED, INVALID, SequenceModel, sequence_defects
from .certificates import CertificateSet
from .flow import (DEFAULT_FLOW, NOISE_BLOCK, FlowConfig, NoiseBlock, em_period, nominal_flow,
                   run_blocks, simulate_open_loop)
from .model import BoxUnion, SwitchedSystem
from .synthesis import GridRuntime, SequenceRuntime


@dataclass
class ValidationReport:
    runs: int
    time_grid: np.ndarray
    mean_distance: np.ndarray
    stderr: np.ndarray
    max_distance: np.ndarray      # per run
    first_entry: np.ndarray       # per run, time of first zero distance (nan if never)
    faults: np.ndarray            # per run, time of first runtime fault (nan if none)
    seed: int

    @property
    def terminal_mean(self) -> float:
        return float(self.mean_distance[-1])

    def time_average(self) -> float:
        return float(np.mean(self.mean_distance))

    def time_average_stderr(self, dist_runs: Optional[np.ndarray] = None) -> float:
        return float(np.mean(self.stderr))

    def to_csv(self) -> str:
        lines = ["t,mean_distance,stderr"]
        for t, m, s in zip(self.time_grid, self.mean_distance, self.stderr):
            lines.append(f"{t:.17g},{m:.17g},{s:.17g}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        entered = np.isfinite(self.first_entry)
        return {"runs": self.runs, "seed": self.seed,
                "terminal_mean_distance": self.terminal_mean,
                "terminal_stderr": float(self.stderr[-1]),
                "time_average_distance": self.time_average(),
                "max_mean_distance": float(self.mean_distance.max()),
                "fraction_entered": float(entered.mean()),
                "mean_first_entry_time": float(np.nanmean(self.first_entry)) if entered.any() else None,
                "runs_with_faults": int(np.isfinite(self.faults).sum())}


def _report(dist: np.ndarray, faults: np.ndarray, tau: float, seed: int) -> ValidationReport:
    runs, k1 = dist.shape
    t = np.arange(k1) * tau
    mean = dist.mean(axis=0)
    se = dist.std(axis=0, ddof=1) / math.sqrt(runs) if runs > 1 else np.zeros(k1)
    hit = dist <= 0.0
    first = np.where(hit.any(axis=1), t[np.argmax(hit, axis=1)], np.nan)
    return ValidationReport(runs, t, mean, se, dist.max(axis=1), first, faults, seed)


def monte_carlo_closed_loop(sys: SwitchedSystem, runtime, x0, T: float, tau: float, runs: int,
                            seed: int, W: BoxUnion, cfg: FlowConfig = DEFAULT_FLOW,
                            threads: int = 1) -> ValidationReport:
    """Simulate ``runs`` Euler-Maruyama paths under the refined controller."""
    k = int(round(T / tau))
    if abs(k * tau - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be a multiple of tau")
    x0 = np.asarray(x0, dtype=float)
    nblocks = (runs + NOISE_BLOCK - 1) // NOISE_BLOCK
    sub = cfg.sde_substeps_per_tau

    if isinstance(runtime, SequenceRuntime):
        schedule = SequenceRuntime(runtime.ctrl, runtime.model, runtime.state).schedule(k)

        def worker(b):
            paths = simulate_open_loop(sys, x0, schedule, tau, NOISE_BLOCK, seed, cfg,
                                       first_run=b * NOISE_BLOCK)
            return W.distance(paths), np.full(NOISE_BLOCK, np.nan)
    else:
        p0, i0 = runtime.start(x0)

        def worker(b):
            nb = NoiseBlock(seed, b, sys.q_hat)
            X = np.broadcast_to(x0, (NOISE_BLOCK, sys.n)).copy()
            dist = np.empty((NOISE_BLOCK, k + 1))
            dist[:, 0] = W.distance(X)
            fault_t = np.full(NOISE_BLOCK, np.nan)
            p = np.full(NOISE_BLOCK, p0, dtype=np.int64)
            i = None if i0 is None else np.full(NOISE_BLOCK, i0, dtype=np.int64)
            for step in range(k):
                apply, ni, fault, nxt = runtime.modes(X, p, i)
                fault_t = np.where(fault & np.isnan(fault_t), step * tau, fault_t)
                X = em_period(sys, X, apply, tau, nb.period(sub, tau / sub))
                if i is not None:
                    p, i = nxt, ni
                dist[:, step + 1] = W.distance(X)
            return dist, fault_t

    parts = run_blocks(worker, nblocks, threads)
    dist = np.concatenate([d for d, _ in parts])[:runs]
    faults = np.concatenate([f for _, f in parts])[:runs]
    return _report(dist, faults, tau, seed)


def hoeffding_samples(range_width: float, confidence: float, accuracy: float) -> int:
    """Smallest n with 2 exp(-2 n a^2 / w^2) <= 1 - confidence."""
    if not range_width > 0 or not accuracy > 0:
        raise ValueError("range width and accuracy must be positive")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    return int(math.ceil(range_width ** 2 * math.log(2 / (1 - confidence)) / (2 * accuracy ** 2)))


def hoeffding_halfwidth(range_width: float, confidence: float, n: int) -> float:
    return range_width * math.sqrt(math.log(2 / (1 - confidence)) / (2 * n))


@dataclass
class EtaHatEstimate:
    eta_hat: float
    half_width: float
    pairs: list              # (state, input) evaluated
    means: np.ndarray        # mean defect per pair
    samples: int
    analytic_bound: float    # from the empirical source moment
    range_width: float
    confidence: float


def _coupled_defects(sys, x_s, modes, u, tau, samples, seed, key, cfg):
    """Defects |xi_{x_s (p1..pN u)}((N+1)tau) - xi_{x_s (p2..pN u)}(N tau)| sharing suffix noise."""
    sub = cfg.sde_substeps_per_tau
    nblocks = (samples + NOISE_BLOCK - 1) // NOISE_BLOCK
    out = []
    for b in range(nblocks):
        nb = NoiseBlock(seed, (key << 24) + b, sys.q_hat)
        A = np.broadcast_to(x_s, (NOISE_BLOCK, sys.n)).copy()
        B = A.copy()
        A = em_period(sys, A, np.full(NOISE_BLOCK, modes[0]), tau, nb.period(sub, tau / sub))
        for p in list(modes[1:]) + [u]:
            dW = nb.period(sub, tau / sub)
            md = np.full(NOISE_BLOCK, p)
            A = em_period(sys, A, md, tau, dW)
            B = em_period(sys, B, md, tau, dW)
        out.append(np.max(np.abs(A - B), axis=1))
    return np.concatenate(out)[:samples]


def estimate_eta_hat(model: SequenceModel, sys: SwitchedSystem, certs: CertificateSet,
                     samples_per_transition: int, seed: int, pairs=None, top_k: int = 4,
                     confidence: float = 1 - 1e-5, range_width: Optional[float] = None,
                     cfg: FlowConfig = DEFAULT_FLOW) -> EtaHatEstimate:
    """Empirical worst mean one-step defect over a subset of (state, input) pairs.

    The default subset is the ``top_k`` pairs with the largest noise-free
    defect. Paths for a state and its shift-successor share the Brownian
    increments of their common mode suffix. ``range_width`` defaults to the
    largest observed sample.
    """
    if model.kind != "sequence":
        raise ValueError("eta_hat applies to sequence models")
    tau, N = model.params.tau, model.N
    x_s = np.asarray(model.params.x_s)
    det = None
    if pairs is None:
        det = sequence_defects(model, sys, cfg)
        if sys.zero_diffusion:
            pairs = [(int(s), int(u)) for s in range(model.num_sequences) for u in range(model.m)]
        else:
            flat = np.argsort(-det.ravel(), kind="stable")[:top_k]
            pairs = [(int(f // model.m), int(f % model.m)) for f in flat]
    pairs = [(int(s), int(u)) for s, u in pairs]
    if sys.zero_diffusion:
        if det is None:
            det = sequence_defects(model, sys, cfg)
        means = np.array([det[model.decode(s)[0], u] for s, u in pairs])
        src = max(float(certs.V(nominal_flow(x_s, p, tau, sys, cfg), x_s)) for p in range(sys.m))
        bound = certs.alpha_lo_inv(math.exp(-certs.kappa * N * tau) * src) ** (1 / certs.q)
        return EtaHatEstimate(float(means.max()), 0.0, pairs, means, 0, bound, 0.0, confidence)
    means, top = [], 0.0
    for j, (s, u) in enumerate(pairs):
        seq = model.decode(s)[0]
        modes = model.digits(seq)
        d = _coupled_defects(sys, x_s, modes, u, tau, samples_per_transition, seed, j + 1, cfg)
        means.append(float(d.mean()))
        top = max(top, float(d.max()))
    means = np.array(means)
    # empirical source moment for the analytic bound
    src = 0.0
    for p in range(sys.m):
        paths = simulate_open_loop(sys, x_s, [p], tau, samples_per_transition, seed + 7919 * (p + 1), cfg)
        src = max(src, float(np.mean(certs.V(paths[:, 1], x_s, p))))
    bound = certs.alpha_lo_inv(math.exp(-certs.kappa * N * tau) * src) ** (1 / certs.q)
    R = top if range_width is None else range_width
    hw = hoeffding_halfwidth(R, confidence, samples_per_transition) if R > 0 else 0.0
    return EtaHatEstimate(float(means.max()), hw, pairs, means, samples_per_transition, bound, R, confidence)


@dataclass
class BisimCheck:
    threshold: float
    max_ratio: float
    violations: list = field(default_factory=list)  # (pair, sequence, step, mean V, margin)

    @property
    def ok(self) -> bool:
        return not self.violations


def random_admissible_inputs(model, s0: int, length: int, rng: np.random.Generator):
    """Random input sequence that stays on valid transitions of the model."""
    s, out = int(s0), []
    for _ in range(length):
        opts = [u for u in rng.permutation(model.m)
                if model.post(np.array([s]), int(u))[0, 0] >= 0]
        if not opts:
            break
        u = int(opts[0])
        out.append(u)
        s = int(model.post(np.array([s]), u)[0, 0])
    return out


def check_bisim_sample(sys: SwitchedSystem, model, certs: CertificateSet, pairs, horizon_steps: int,
                       runs: int, seed: int, sequences: int = 1, epsilon: Optional[float] = None,
                       slack: float = 0.15, cfg: FlowConfig = DEFAULT_FLOW) -> BisimCheck:
    """Empirical check of E[V(x, H(x_q))] <= alpha_lo(eps^q) (1 + slack) along matched runs.

    ``pairs`` holds (concrete initial state, abstract initial state).
    """
    eps = model.epsilon if epsilon is None else epsilon
    thr = certs.alpha_lo(eps ** certs.q)
    rng = np.random.default_rng(seed)
    res = BisimCheck(thr, 0.0)
    key = 0
    for pi, (x0, s0) in enumerate(pairs):
        for si in range(sequences):
            inputs = random_admissible_inputs(model, s0, horizon_steps, rng)
            states = [int(s0)]
            for u in inputs:
                states.append(int(model.post(np.array([states[-1]]), u)[0, 0]))
            states = np.array(states)
            applied = [int(np.asarray(model.applied_mode(np.array([s]), u))[0]) for s, u in zip(states[:-1], inputs)]
            key += 1
            paths = simulate_open_loop(sys, x0, applied, model.params.tau, runs, seed + key, cfg)
            ys = model.output(states)
            cert_modes = [applied[0]] + applied if applied else [0]
            for k in range(len(states)):
                v = float(np.mean(certs.V(paths[:, k], ys[k], cert_modes[k])))
                res.max_ratio = max(res.max_ratio, v / thr)
                if v > thr * (1 + slack):
                    res.violations.append((pi, si, k, v, v - thr * (1 + slack)))
    return res
