"""Quadratic incremental Lyapunov certificates and the bounds derived from them.

``V_p(x, x') = ((1/q) (x - x')^T P_p (x - x'))^(q/2)`` with linear envelopes
``c_lo * |x - x'|^q <= V_p <= c_hi * |x - x'|^q`` in the infinity norm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.integrate
import scipy.linalg
import yaml

from .model import Affine, BoxUnion, Linear, SwitchedSystem, SystemFormatError


def _tol_psd(residual: np.ndarray) -> float:
    return 1e-9 * max(1.0, float(np.linalg.norm(residual, 2)))


def _check_sym(P: np.ndarray) -> None:
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"P must be square, got shape {P.shape}")
    if not np.allclose(P, P.T, rtol=0, atol=1e-12 * max(1.0, np.abs(P).max())):
        raise ValueError("P is not symmetric")


def lmi_matrix(A, sigmas, P) -> np.ndarray:
    """M = P A + A^T P + sum_i sigma_i^T P sigma_i (symmetrized)."""
    A, P = np.asarray(A, float), np.asarray(P, float)
    sigmas = np.asarray(sigmas, float).reshape(-1, *A.shape) if np.size(sigmas) else np.zeros((0,) + A.shape)
    _check_sym(P)
    if A.shape != P.shape:
        raise ValueError(f"A has shape {A.shape} but P has shape {P.shape}")
    M = P @ A + A.T @ P
    for s in sigmas:
        M = M + s.T @ P @ s
    return 0.5 * (M + M.T)


def verify_lmi(A, sigmas, P, kappa_hat: float) -> bool:
    """True iff P A + A^T P + sum sigma^T P sigma <= -kappa_hat P (up to tol_psd)."""
    M = lmi_matrix(A, sigmas, P)
    R = M + kappa_hat * np.asarray(P, float)
    R = 0.5 * (R + R.T)
    return bool(np.linalg.eigvalsh(R).max() <= _tol_psd(R))


def max_kappa_hat(A, sigmas, P) -> float:
    """Largest kappa_hat with the LMI satisfied; 0.0 when no decay is certified."""
    M = lmi_matrix(A, sigmas, P)
    P = np.asarray(P, float)
    if np.linalg.eigvalsh(P).min() <= 0:
        raise ValueError("P is not positive definite")
    lam = scipy.linalg.eigh(-M, P, eigvals_only=True)
    k = float(lam.min())
    return k if k > 0 else 0.0


@dataclass(frozen=True)
class QuadraticCertificate:
    P: np.ndarray
    q: float
    kappa: float
    alpha_lo_coeff: float
    alpha_hi_coeff: float
    gamma_hat_slope: float

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        object.__setattr__(self, "P", P)
        _check_sym(P)
        if np.linalg.eigvalsh(P).min() <= 0:
            raise ValueError("P is not positive definite")
        if not (0 < self.alpha_lo_coeff <= self.alpha_hi_coeff):
            raise ValueError("need 0 < alpha_lo_coeff <= alpha_hi_coeff")
        if self.q < 1:
            raise ValueError("moment order q must be >= 1")

    @property
    def lam_min(self) -> float:
        return float(np.linalg.eigvalsh(self.P).min())

    @property
    def lam_max(self) -> float:
        return float(np.linalg.eigvalsh(self.P).max())

    def V(self, x, y) -> np.ndarray:
        d = np.asarray(x, float) - np.asarray(y, float)
        quad = np.einsum("...i,ij,...j->...", d, self.P, d)
        return (np.maximum(quad, 0.0) / self.q) ** (self.q / 2)

    def alpha_lo(self, y):
        return self.alpha_lo_coeff * y

    def alpha_hi(self, y):
        return self.alpha_hi_coeff * y

    def alpha_lo_inv(self, v):
        return v / self.alpha_lo_coeff

    def alpha_hi_inv(self, v):
        return v / self.alpha_hi_coeff


@dataclass(frozen=True)
class CertificateSet:
    per_mode: tuple
    common: bool
    mu: float
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "per_mode", tuple(self.per_mode))
        qs = {c.q for c in self.per_mode}
        if len(qs) != 1:
            raise ValueError("all certificates must share the moment order q")
        if self.mu < 1:
            raise ValueError("mu must be >= 1")
        if self.common and self.mu != 1:
            raise ValueError("a common certificate must have mu = 1")

    @property
    def q(self) -> float:
        return self.per_mode[0].q

    @property
    def m(self) -> int:
        return len(self.per_mode)

    @property
    def kappa(self) -> float:
        return min(c.kappa for c in self.per_mode)

    @property
    def alpha_lo_coeff(self) -> float:
        return min(c.alpha_lo_coeff for c in self.per_mode)

    @property
    def alpha_hi_coeff(self) -> float:
        return max(c.alpha_hi_coeff for c in self.per_mode)

    @property
    def gamma_hat_slope(self) -> float:
        return max(c.gamma_hat_slope for c in self.per_mode)

    def alpha_lo(self, y):
        return self.alpha_lo_coeff * y

    def alpha_hi(self, y):
        return self.alpha_hi_coeff * y

    def alpha_lo_inv(self, v):
        return v / self.alpha_lo_coeff

    def alpha_hi_inv(self, v):
        return v / self.alpha_hi_coeff

    def V(self, x, y, p: int = 0):
        return self.per_mode[p].V(x, y)


def compute_mu(certs) -> float:
    """max over ordered mode pairs of lambda_max(P_p, P_p')^(q/2); 1 when all P agree."""
    per_mode = certs.per_mode if isinstance(certs, CertificateSet) else tuple(certs)
    qs = {c.q for c in per_mode}
    if len(qs) != 1:
        raise ValueError("mismatched moment orders q")
    q = qs.pop()
    if all(np.array_equal(c.P, per_mode[0].P) for c in per_mode):
        return 1.0
    best = 1.0
    for a in per_mode:
        for b in per_mode:
            if a is b:
                continue
            lam = scipy.linalg.eigh(a.P, b.P, eigvals_only=True).max()
            best = max(best, float(lam) ** (q / 2))
    return best


def pencil_mu(Ps: Sequence, q: float) -> float:
    """compute_mu for bare matrices."""
    certs = [QuadraticCertificate(np.asarray(P, float), q, 1.0, 1.0, 1.0, 1.0) for P in Ps]
    return compute_mu(certs)


def default_envelopes(P: np.ndarray, q: float) -> tuple[float, float]:
    """(c_lo, c_hi) for the infinity norm: |d|_inf <= |d|_2 <= sqrt(n) |d|_inf."""
    lam = np.linalg.eigvalsh(P)
    n = P.shape[0]
    return (lam.min() / q) ** (q / 2), (n * lam.max() / q) ** (q / 2)


def default_gamma_slope(P: np.ndarray, q: float, domain: Optional[BoxUnion] = None) -> float:
    """Infinity-to-one dual-norm bound on the gradient of V in its second argument.

    For q=1 the 2-norm gradient is bounded by sqrt(lambda_max); other q need
    the domain diameter.
    """
    lam = np.linalg.eigvalsh(P)
    n = P.shape[0]
    if q == 1:
        return math.sqrt(lam.max()) * math.sqrt(n)
    if domain is None:
        raise ValueError("gamma_hat slope for q != 1 needs a bounded domain")
    blo, bhi = domain.bounding_box()
    R = math.sqrt(n) * float(np.max(bhi - blo))
    lam_ref = lam.max() if q >= 2 else lam.min()
    g2 = (lam_ref / q) ** (q / 2 - 1) * lam.max() * R ** (q - 1)
    return g2 * math.sqrt(n)


def build_certificates(sys: SwitchedSystem, Ps, q: float = 1.0, kappa=None,
                       alpha_lo=None, alpha_hi=None, gamma_hat_slope=None,
                       mu=None) -> CertificateSet:
    """Assemble a CertificateSet, computing every field not supplied by the user.

    ``kappa``, ``alpha_lo``, ``alpha_hi`` and ``gamma_hat_slope`` accept a
    scalar (all modes) or one value per mode. Affine modes get
    ``kappa = max_kappa_hat / 2`` when kappa is not given.
    """
    Ps = [np.asarray(P, float) for P in Ps]
    if len(Ps) == 1 and sys.m > 1:
        Ps = Ps * sys.m
    if len(Ps) != sys.m:
        raise ValueError(f"need one P per mode ({sys.m}), got {len(Ps)}")

    def per(v):
        if v is None:
            return [None] * sys.m
        if np.ndim(v) == 0:
            return [float(v)] * sys.m
        v = [float(x) for x in v]
        if len(v) != sys.m:
            raise ValueError("per-mode value list has the wrong length")
        return v

    kap, alo, ahi, gs = per(kappa), per(alpha_lo), per(alpha_hi), per(gamma_hat_slope)
    prov = {"kappa": [], "alpha_lo": [], "alpha_hi": [], "gamma_hat_slope": [], "kappa_hat": []}
    certs = []
    for p, (P, md) in enumerate(zip(Ps, sys.modes)):
        if P.shape != (sys.n, sys.n):
            raise ValueError(f"P for mode {p + 1} has shape {P.shape}")
        if md.is_affine:
            kh = max_kappa_hat(md.drift.A, md.diffusion.sigmas, P)
        else:
            kh = None
        prov["kappa_hat"].append(kh)
        if kap[p] is None:
            if kh is None:
                raise ValueError(f"mode {p + 1} is not affine; supply kappa explicitly")
            if kh <= 0:
                raise ValueError(f"mode {p + 1}: P does not certify decay (kappa_hat = 0)")
            kap[p] = kh / 2
            prov["kappa"].append("computed")
        else:
            prov["kappa"].append("user")
        clo, chi = default_envelopes(P, q)
        prov["alpha_lo"].append("computed" if alo[p] is None else "user")
        prov["alpha_hi"].append("computed" if ahi[p] is None else "user")
        prov["gamma_hat_slope"].append("computed" if gs[p] is None else "user")
        certs.append(QuadraticCertificate(
            P, q, kap[p],
            clo if alo[p] is None else alo[p],
            chi if ahi[p] is None else ahi[p],
            default_gamma_slope(P, q, sys.domain) if gs[p] is None else gs[p]))
    common = all(np.array_equal(P, Ps[0]) for P in Ps)
    mu_c = compute_mu(certs)
    if mu is None:
        prov["mu"] = "computed"
        mu = mu_c
    else:
        prov["mu"] = "user"
        mu = float(mu)
    return CertificateSet(tuple(certs), common, 1.0 if common else mu, prov)


def beta(r, s, cert) -> float:
    """beta(r, s) = alpha_lo^-1(alpha_hi(r) e^{-kappa s}) for linear envelopes."""
    if np.any(np.asarray(r) < 0) or np.any(np.asarray(s) < 0):
        raise ValueError("beta needs nonnegative arguments")
    return cert.alpha_hi_coeff / cert.alpha_lo_coeff * r * np.exp(-cert.kappa * s)


def beta_switched(r, s, certs: CertificateSet, dwell_time: float):
    """Decay envelope under dwell-respecting switching (rate kappa - log(mu)/tau_d)."""
    rate = certs.kappa - math.log(certs.mu) / dwell_time
    return certs.alpha_hi_coeff / certs.alpha_lo_coeff * r * np.exp(-rate * s)


def _h_prefactor(cert: QuadraticCertificate, sys: SwitchedSystem, p: int) -> float:
    Z = sys.modes[p].lipschitz_diffusion
    return 0.5 * cert.lam_max * min(sys.n, sys.q_hat) * Z ** 2


def h_point_bound(x, t: float, p: int, certs: CertificateSet, sys: SwitchedSystem,
                  method: str = "closed") -> float:
    """Bound on the q-th moment gap between the solution process and the nominal flow.

    ``x`` is a state vector or its infinity norm; ``p`` is a 0-based mode index.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    cert = certs.per_mode[p]
    r = float(x) if np.ndim(x) == 0 else float(np.max(np.abs(x)))
    pre = _h_prefactor(cert, sys, p)
    if pre == 0 or t == 0 or r == 0:
        return 0.0
    q, k = cert.q, cert.kappa
    ratio = cert.alpha_hi_coeff / cert.alpha_lo_coeff
    if method == "closed":
        integral = (ratio * r ** q) ** (2 / q) * (q / (2 * k)) * -math.expm1(-2 * k * t / q)
    elif method == "quad":
        integral, _ = scipy.integrate.quad(lambda s: beta(r ** q, s, cert) ** (2 / q), 0, t,
                                           epsabs=0, epsrel=1e-13, limit=200)
    else:
        raise ValueError(f"unknown method {method!r}")
    return cert.alpha_lo_inv(pre * math.exp(-k * t) * integral)


def h_max_point(x, t: float, certs: CertificateSet, sys: SwitchedSystem) -> float:
    return max(h_point_bound(x, t, p, certs, sys) for p in range(sys.m))


def h_set_bound(X: BoxUnion, t: float, certs: CertificateSet, sys: SwitchedSystem) -> float:
    """max over modes of the point bound at sup_{x in X} |x|."""
    if X.is_empty():
        raise ValueError("empty set")
    return h_max_point(X.max_norm(), t, certs, sys)


def gamma_hat(r, certs) -> float:
    if np.any(np.asarray(r) < 0):
        raise ValueError("gamma_hat needs a nonnegative argument")
    return certs.gamma_hat_slope * r


# ---------------------------------------------------------------- file io

_CERT_KEYS = {"q", "P", "kappa", "alpha_lo", "alpha_hi", "gamma_hat_slope", "mu"}


def certificates_from_dict(doc: dict, sys: SwitchedSystem) -> CertificateSet:
    if not isinstance(doc, dict):
        raise SystemFormatError("certificate file must be a mapping")
    extra = set(doc) - _CERT_KEYS
    if extra:
        raise SystemFormatError(f"certificates: unknown keys {sorted(extra)}")
    if "P" not in doc:
        raise SystemFormatError("certificates: missing key 'P'")
    P = np.array(doc["P"], dtype=float)
    Ps = [P] if P.ndim == 2 else list(P)
    return build_certificates(sys, Ps, float(doc.get("q", 1.0)), doc.get("kappa"),
                              doc.get("alpha_lo"), doc.get("alpha_hi"),
                              doc.get("gamma_hat_slope"), doc.get("mu"))


def load_certificates(path, sys: SwitchedSystem) -> CertificateSet:
    with open(path) as fh:
        return certificates_from_dict(yaml.safe_load(fh), sys)


def certificate_record(certs: CertificateSet) -> dict:
    """Filled-in certificate data with provenance, for reports."""
    modes = []
    for p, c in enumerate(certs.per_mode):
        modes.append({
            "kappa": c.kappa, "kappa_hat": certs.provenance.get("kappa_hat", [None] * certs.m)[p],
            "alpha_lo_coeff": c.alpha_lo_coeff, "alpha_hi_coeff": c.alpha_hi_coeff,
            "gamma_hat_slope": c.gamma_hat_slope,
        })
    return {"q": certs.q, "common": certs.common, "mu": certs.mu, "kappa": certs.kappa,
            "alpha_lo_coeff": certs.alpha_lo_coeff, "alpha_hi_coeff": certs.alpha_hi_coeff,
            "gamma_hat_slope": certs.gamma_hat_slope, "modes": modes,
            "provenance": certs.provenance}
