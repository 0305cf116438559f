"""Quantization-parameter solvers for grid and mode-sequence abstractions.

Every solver returns the inequality it checked with both sides, so reports
can show why a parameter was accepted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .certificates import CertificateSet, gamma_hat, h_max_point, h_set_bound
from .flow import DEFAULT_FLOW, FlowConfig, nominal_flow
from .model import BoxUnion, SwitchedSystem

SLACK = 1e-12


class InfeasibleError(ValueError):
    """No parameter satisfies the named condition."""

    def __init__(self, condition: str, detail: str = ""):
        self.condition = condition
        super().__init__(f"infeasible: {condition}" + (f" ({detail})" if detail else ""))


@dataclass(frozen=True)
class GridParams:
    tau: float
    eta: float
    epsilon: float
    dwell_steps: Optional[int] = None

    def __post_init__(self):
        if not (self.tau > 0 and self.eta > 0 and self.epsilon > 0):
            raise ValueError("tau, eta and epsilon must be positive")
        if self.dwell_steps is not None and self.dwell_steps < 1:
            raise ValueError("dwell_steps must be >= 1")


@dataclass(frozen=True)
class SeqParams:
    tau: float
    N: int
    x_s: tuple
    epsilon: float
    dwell_steps: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "x_s", tuple(float(v) for v in self.x_s))
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.dwell_steps is not None and self.dwell_steps < 1:
            raise ValueError("dwell_steps must be >= 1")


@dataclass
class Inequality:
    name: str
    lhs: float
    rhs: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + SLACK

    def as_dict(self) -> dict:
        return {"name": self.name, "lhs": self.lhs, "rhs": self.rhs, "holds": self.holds}


def dwell_steps_for(sys: SwitchedSystem, tau: float) -> Optional[int]:
    """N_hat = tau_d / tau, which must be an integer."""
    if sys.dwell_time is None:
        return None
    r = sys.dwell_time / tau
    k = int(round(r))
    if k < 1 or abs(r - k) > 1e-9 * max(1.0, r):
        raise ValueError(f"dwell time {sys.dwell_time} is not a positive multiple of tau {tau}")
    return k


def dwell_factor(certs: CertificateSet, dwell_time: float) -> float:
    """(1/mu - e^{-kappa tau_d}) / (1 - e^{-kappa tau_d}); needs tau_d > log(mu)/kappa."""
    k, mu = certs.kappa, certs.mu
    if not dwell_time > math.log(mu) / k:
        raise InfeasibleError("dwell time too short",
                              f"tau_d={dwell_time} <= log(mu)/kappa={math.log(mu) / k}")
    e = math.exp(-k * dwell_time)
    return (1 / mu - e) / (1 - e)


def _use_dwell(certs: CertificateSet, dwell_time: Optional[float]) -> bool:
    if certs.common:
        return False
    if dwell_time is None:
        raise InfeasibleError("multiple certificates need a dwell time")
    return True


def min_epsilon_grid(tau: float, certs: CertificateSet, sys: SwitchedSystem, X0: BoxUnion,
                     dwell_time: Optional[float] = None) -> float:
    """Lower bound on the precision reachable by a grid abstraction."""
    q = certs.q
    h = h_set_bound(X0, tau, certs, sys)
    val = gamma_hat(h ** (1 / q), certs) / -math.expm1(-certs.kappa * tau)
    if _use_dwell(certs, dwell_time):
        val /= dwell_factor(certs, dwell_time)
    return certs.alpha_lo_inv(val) ** (1 / q)


@dataclass
class EtaResult:
    eta: float
    h: float
    inequalities: list
    binding: str


def grid_inequalities(tau, eta, epsilon, certs, sys, X0, dwell_time=None, h=None) -> list:
    q = certs.q
    if h is None:
        h = h_set_bound(X0, tau, certs, sys)
    a_eps = certs.alpha_lo(epsilon ** q)
    ineqs = [Inequality("envelope: alpha_hi(eta^q) <= alpha_lo(eps^q)",
                        certs.alpha_hi(eta ** q), a_eps)]
    dist = gamma_hat(h ** (1 / q) + eta, certs)
    if _use_dwell(certs, dwell_time):
        F = dwell_factor(certs, dwell_time)
        ineqs.append(Inequality("dwell: gamma(h^(1/q)+eta) <= F (1-e^{-kappa tau}) alpha_lo(eps^q)",
                                dist, F * -math.expm1(-certs.kappa * tau) * a_eps))
    else:
        ineqs.append(Inequality("common: e^{-kappa tau} alpha_lo(eps^q) + gamma(h^(1/q)+eta) <= alpha_lo(eps^q)",
                                math.exp(-certs.kappa * tau) * a_eps + dist, a_eps))
    return ineqs


def solve_eta(tau: float, epsilon: float, certs: CertificateSet, sys: SwitchedSystem,
              X0: BoxUnion, dwell_time: Optional[float] = None) -> EtaResult:
    """Largest eta <= span(domain) meeting both grid conditions."""
    q = certs.q
    h = h_set_bound(X0, tau, certs, sys)
    a_eps = certs.alpha_lo(epsilon ** q)
    bound_env = certs.alpha_hi_inv(a_eps) ** (1 / q)
    slack = -math.expm1(-certs.kappa * tau) * a_eps
    if _use_dwell(certs, dwell_time):
        slack *= dwell_factor(certs, dwell_time)
        name = "dwell condition"
    else:
        name = "common condition"
    bound_dist = slack / certs.gamma_hat_slope - h ** (1 / q)
    if bound_dist <= 0:
        raise InfeasibleError(f"{name}: precision below the lower bound",
                              f"gamma(h^(1/q))={gamma_hat(h ** (1 / q), certs)} >= slack {slack}")
    span = sys.domain.span()
    cands = {"envelope condition": bound_env, name: bound_dist, "domain span": span}
    binding = min(cands, key=cands.get)
    eta = cands[binding]
    return EtaResult(eta, h, grid_inequalities(tau, eta, epsilon, certs, sys, X0, dwell_time, h), binding)


def source_defect(x_s, tau: float, certs: CertificateSet, sys: SwitchedSystem,
                  cfg: FlowConfig = DEFAULT_FLOW) -> float:
    """max over mode pairs of V_{p'}(flow_p(x_s, tau), x_s)."""
    x_s = np.asarray(x_s, float)
    best = 0.0
    for p in range(sys.m):
        y = nominal_flow(x_s, p, tau, sys, cfg)
        for pp in range(sys.m):
            best = max(best, float(certs.V(y, x_s, pp)))
            if certs.common:
                break
    return best


def decay_rate(certs: CertificateSet, dwell_time: Optional[float] = None) -> float:
    if _use_dwell(certs, dwell_time):
        return certs.kappa - math.log(certs.mu) / dwell_time
    return certs.kappa


def eta_bar_analytic(N: int, tau: float, x_s, certs: CertificateSet, sys: SwitchedSystem,
                     dwell_time: Optional[float] = None, cfg: FlowConfig = DEFAULT_FLOW) -> float:
    """Upper bound on the worst one-step defect of a sequence abstraction."""
    rate = decay_rate(certs, dwell_time)
    v = math.exp(-rate * N * tau) * source_defect(x_s, tau, certs, sys, cfg)
    return certs.alpha_lo_inv(v) ** (1 / certs.q)


def sequence_inequality(N, tau, epsilon, x_s, certs, sys, dwell_time=None,
                        cfg: FlowConfig = DEFAULT_FLOW, eta_bar=None) -> Inequality:
    q = certs.q
    h = h_max_point(np.asarray(x_s, float), (N + 1) * tau, certs, sys)
    if eta_bar is None:
        eta_bar = eta_bar_analytic(N, tau, x_s, certs, sys, dwell_time, cfg)
    a_eps = certs.alpha_lo(epsilon ** q)
    dist = gamma_hat(h ** (1 / q) + eta_bar, certs)
    if _use_dwell(certs, dwell_time):
        F = dwell_factor(certs, dwell_time)
        return Inequality(f"dwell sequence condition at N={N}", dist,
                          F * -math.expm1(-certs.kappa * tau) * a_eps)
    return Inequality(f"common sequence condition at N={N}",
                      math.exp(-certs.kappa * tau) * a_eps + dist, a_eps)


@dataclass
class HorizonResult:
    N: int
    eta_bar: float
    h: float
    inequality: Inequality
    previous: Optional[Inequality] = None


def solve_horizon_N(tau: float, epsilon: float, x_s, certs: CertificateSet, sys: SwitchedSystem,
                    dwell_time: Optional[float] = None, n_max: int = 64,
                    cfg: FlowConfig = DEFAULT_FLOW) -> HorizonResult:
    """Smallest N in 1..n_max satisfying the sequence-abstraction condition."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x_s = np.asarray(x_s, float)
    defect = source_defect(x_s, tau, certs, sys, cfg)
    rate = decay_rate(certs, dwell_time)
    prev = None
    for N in range(1, n_max + 1):
        eb = certs.alpha_lo_inv(math.exp(-rate * N * tau) * defect) ** (1 / certs.q)
        ineq = sequence_inequality(N, tau, epsilon, x_s, certs, sys, dwell_time, cfg, eb)
        if ineq.holds:
            h = h_max_point(x_s, (N + 1) * tau, certs, sys)
            return HorizonResult(N, eb, h, ineq, prev)
        prev = ineq
    raise InfeasibleError("sequence condition", f"no N <= {n_max}; last lhs={prev.lhs} rhs={prev.rhs}")


def certified_epsilon_sequence(N: int, tau: float, x_s, certs: CertificateSet, sys: SwitchedSystem,
                               dwell_time: Optional[float] = None, eta_bar: Optional[float] = None,
                               cfg: FlowConfig = DEFAULT_FLOW) -> float:
    """Smallest epsilon for which a given horizon N satisfies the sequence condition."""
    q = certs.q
    if eta_bar is None:
        eta_bar = eta_bar_analytic(N, tau, x_s, certs, sys, dwell_time, cfg)
    h = h_max_point(np.asarray(x_s, float), (N + 1) * tau, certs, sys)
    val = gamma_hat(h ** (1 / q) + eta_bar, certs) / -math.expm1(-certs.kappa * tau)
    if _use_dwell(certs, dwell_time):
        val /= dwell_factor(certs, dwell_time)
    return certs.alpha_lo_inv(val) ** (1 / q)


def certified_epsilon_grid(tau: float, eta: float, certs: CertificateSet, sys: SwitchedSystem,
                           X0: BoxUnion, dwell_time: Optional[float] = None) -> float:
    """Smallest epsilon for which a given eta satisfies both grid conditions."""
    q = certs.q
    h = h_set_bound(X0, tau, certs, sys)
    val = gamma_hat(h ** (1 / q) + eta, certs) / -math.expm1(-certs.kappa * tau)
    if _use_dwell(certs, dwell_time):
        val /= dwell_factor(certs, dwell_time)
    val = max(val, certs.alpha_hi(eta ** q))
    return certs.alpha_lo_inv(val) ** (1 / q)


@dataclass
class DeltaSequence:
    values: np.ndarray
    closed_form: np.ndarray
    feasible: bool
    diagnostics: list


def delta_sequence(epsilon: float, tau: float, dwell_steps: int, disturbance: float,
                   certs: CertificateSet, strict: bool = False) -> DeltaSequence:
    """delta_{i+1} = e^{-kappa tau} delta_i + disturbance, delta_0 = alpha_lo(eps^q)."""
    k = certs.kappa
    d0 = certs.alpha_lo(epsilon ** certs.q)
    c = math.exp(-k * tau)
    vals = np.empty(dwell_steps + 1)
    vals[0] = d0
    for i in range(dwell_steps):
        vals[i + 1] = c * vals[i] + disturbance
    i = np.arange(dwell_steps + 1)
    geo = np.where(i == 0, 0.0, np.expm1(-i * k * tau) / math.expm1(-k * tau)) if k * tau > 0 else i.astype(float)
    closed = np.exp(-i * k * tau) * d0 + disturbance * geo
    diags = []
    if np.any(np.diff(vals) > SLACK * max(1.0, d0)):
        diags.append("delta sequence is not nonincreasing")
    if vals[-1] > d0 / certs.mu + SLACK * max(1.0, d0):
        diags.append(f"delta_N_hat={vals[-1]} exceeds delta_0/mu={d0 / certs.mu}")
    if strict and diags:
        raise InfeasibleError("delta recursion", "; ".join(diags))
    return DeltaSequence(vals, closed, not diags, diags)


def grid_count_estimate(X0: BoxUnion, eta: float, m: int = 1, dwell_steps: Optional[int] = None) -> float:
    """K / eta^n with K the volume of X0, times m N_hat for the dwell grid."""
    c = X0.volume() / eta ** X0.n
    if dwell_steps is not None:
        c *= m * dwell_steps
    return c


def seq_count(m: int, N: int, dwell_steps: Optional[int] = None) -> int:
    c = m ** N
    if dwell_steps is not None:
        c *= dwell_steps
    return c


def selection_criterion(m: int, n: int, tau: float, certs: CertificateSet,
                        dwell_time: Optional[float] = None) -> float:
    """m e^{-rate tau n / q}; sequence models scale better when this is <= 1."""
    return m * math.exp(-decay_rate(certs, dwell_time) * tau * n / certs.q)


def compare_approaches(sys: SwitchedSystem, certs: CertificateSet, tau: float, epsilon: float,
                       X0: Optional[BoxUnion] = None, x_s=None, dwell_time: Optional[float] = None,
                       n_max: int = 64, cfg: FlowConfig = DEFAULT_FLOW) -> dict:
    X0 = X0 or sys.domain
    use_dwell = not certs.common
    if use_dwell and dwell_time is None:
        dwell_time = sys.dwell_time
    nh = dwell_steps_for(sys, tau) if use_dwell else None
    crit = selection_criterion(sys.m, sys.n, tau, certs, dwell_time if use_dwell else None)
    report = {"criterion_value": crit, "criterion_holds": crit <= 1}
    try:
        er = solve_eta(tau, epsilon, certs, sys, X0, dwell_time if use_dwell else None)
        report["eta"] = er.eta
        report["grid_count_estimate"] = grid_count_estimate(X0, er.eta, sys.m, nh)
    except InfeasibleError as e:
        report["grid_count_estimate"] = None
        report["grid_infeasible"] = str(e)
    if x_s is None:
        x_s = select_source_state(sys, certs, tau, cfg=cfg)
    try:
        hr = solve_horizon_N(tau, epsilon, x_s, certs, sys, dwell_time if use_dwell else None, n_max, cfg)
        report["N"] = hr.N
        report["seq_count_estimate"] = seq_count(sys.m, hr.N, nh)
    except InfeasibleError as e:
        report["seq_count_estimate"] = None
        report["seq_infeasible"] = str(e)
    g, s = report["grid_count_estimate"], report["seq_count_estimate"]
    if g is not None and s is not None:
        report["recommendation"] = "sequence" if s <= g else "grid"
    elif s is not None:
        report["recommendation"] = "sequence"
    elif g is not None:
        report["recommendation"] = "grid"
    else:
        report["recommendation"] = "sequence" if crit <= 1 else "grid"
    return report


def select_source_state(sys: SwitchedSystem, certs: CertificateSet, tau: float,
                        points_per_dim: Optional[int] = None, cfg: FlowConfig = DEFAULT_FLOW) -> np.ndarray:
    """Coarse-grid argmin over the domain of the source defect."""
    lo, hi = sys.domain.bounding_box()
    if points_per_dim is None:
        points_per_dim = max(3, int(round(2e4 ** (1 / sys.n))))
    axes = [np.linspace(l, h, points_per_dim) for l, h in zip(lo, hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, sys.n)
    pts = pts[sys.domain.contains(pts)]
    worst = np.zeros(len(pts))
    for p in range(sys.m):
        y = nominal_flow(pts, p, tau, sys, cfg)
        for pp in range(sys.m):
            worst = np.maximum(worst, certs.V(y, pts, pp))
            if certs.common:
                break
    return pts[int(np.argmin(worst))]
