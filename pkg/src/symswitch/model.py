"""Stochastic switched systems with affine or general modes and a box-union domain.

A mode is ``dx = f_p(x) dt + g_p(x) dW`` with ``W`` a ``q_hat``-dimensional
Brownian motion. All state norms are infinity norms.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import yaml


class SystemFormatError(ValueError):
    """Raised when a system description cannot be parsed."""


# ---------------------------------------------------------------- box unions

@dataclass(frozen=True)
class BoxUnion:
    """Finite union of closed axis-aligned boxes, stored as (k, n) arrays."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_2d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError(f"box bounds shape mismatch {lo.shape} vs {hi.shape}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def box(cls, lo, hi) -> "BoxUnion":
        return cls(np.asarray(lo, float)[None, :], np.asarray(hi, float)[None, :])

    @classmethod
    def empty(cls, n: int) -> "BoxUnion":
        return cls(np.zeros((0, n)), np.zeros((0, n)))

    @classmethod
    def from_list(cls, boxes, n: Optional[int] = None) -> "BoxUnion":
        """Build from ``[{"lo": [...], "hi": [...]}, ...]`` or ``[(lo, hi), ...]``."""
        los, his = [], []
        for b in boxes:
            if isinstance(b, dict):
                extra = set(b) - {"lo", "hi"}
                if extra:
                    raise SystemFormatError(f"unknown box keys {sorted(extra)}")
                los.append(b["lo"])
                his.append(b["hi"])
            else:
                los.append(b[0])
                his.append(b[1])
        if not los:
            if n is None:
                raise ValueError("cannot infer dimension of an empty box list")
            return cls.empty(n)
        return cls(np.array(los, dtype=float), np.array(his, dtype=float))

    def to_list(self) -> list:
        return [{"lo": l.tolist(), "hi": h.tolist()} for l, h in zip(self.lo, self.hi)]

    @property
    def n(self) -> int:
        return self.lo.shape[1]

    @property
    def num_boxes(self) -> int:
        return self.lo.shape[0]

    def is_empty(self) -> bool:
        return self.num_boxes == 0 or not np.any(np.all(self.lo <= self.hi, axis=1))

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        if self.num_boxes == 0:
            raise ValueError("empty box union has no bounding box")
        return self.lo.min(axis=0), self.hi.max(axis=0)

    def span(self) -> float:
        """Smallest side length over all boxes."""
        return float(np.min(self.hi - self.lo))

    def volume(self) -> float:
        """Sum of box volumes (overlaps counted twice)."""
        return float(np.sum(np.prod(self.hi - self.lo, axis=1)))

    def max_norm(self) -> float:
        """sup of the infinity norm over the union (attained at a corner)."""
        if self.num_boxes == 0:
            raise ValueError("empty set")
        return float(np.max(np.maximum(np.abs(self.lo), np.abs(self.hi))))

    def contains(self, x: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Membership of points ``x`` of shape (..., n); closed boxes."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1], dtype=bool)
        for l, h in zip(self.lo, self.hi):
            out |= np.all((x >= l - tol) & (x <= h + tol), axis=-1)
        return out

    def distance(self, x: np.ndarray) -> np.ndarray:
        """Infinity-norm distance from points to the union (inf over boxes)."""
        x = np.asarray(x, dtype=float)
        if self.num_boxes == 0:
            return np.full(x.shape[:-1], np.inf)
        best = np.full(x.shape[:-1], np.inf)
        for l, h in zip(self.lo, self.hi):
            d = np.max(np.maximum(np.maximum(l - x, x - h), 0.0), axis=-1)
            best = np.minimum(best, d)
        return best

    def shrink(self, eps: float) -> "BoxUnion":
        lo, hi = self.lo + eps, self.hi - eps
        keep = np.all(lo <= hi, axis=1)
        return BoxUnion(lo[keep], hi[keep])

    def inflate(self, eps: float) -> "BoxUnion":
        return BoxUnion(self.lo - eps, self.hi + eps)

    def subtract(self, other: "BoxUnion") -> "BoxUnion":
        """Closed-box decomposition of ``self`` minus the interior of ``other``.

        Boundary points of ``other`` stay in the result, which keeps the
        pieces closed.
        """
        pieces = list(zip(self.lo, self.hi))
        for ol, oh in zip(other.lo, other.hi):
            nxt = []
            for l, h in pieces:
                nxt.extend(_box_minus(l, h, ol, oh))
            pieces = nxt
        if not pieces:
            return BoxUnion.empty(self.n)
        return BoxUnion(np.array([p[0] for p in pieces]), np.array([p[1] for p in pieces]))

    def __eq__(self, other):
        return (isinstance(other, BoxUnion) and self.lo.shape == other.lo.shape
                and np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi))

    def __hash__(self):
        return hash((self.lo.tobytes(), self.hi.tobytes()))


def _box_minus(l, h, ol, oh):
    """Split box [l,h] into closed pieces covering [l,h] minus the open box (ol,oh)."""
    if np.any(oh <= l) or np.any(ol >= h):
        return [(l.copy(), h.copy())]
    out = []
    l, h = l.copy(), h.copy()
    for d in range(len(l)):
        if ol[d] > l[d]:
            nh = h.copy()
            nh[d] = ol[d]
            out.append((l.copy(), nh))
            l[d] = ol[d]
        if oh[d] < h[d]:
            nl = l.copy()
            nl[d] = oh[d]
            out.append((nl, h.copy()))
            h[d] = oh[d]
    return out


# ------------------------------------------------------------------- modes

@dataclass(frozen=True)
class Affine:
    A: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class GeneralDrift:
    func: Callable[[np.ndarray], np.ndarray]  # vectorized over leading axes
    lipschitz: float


@dataclass(frozen=True)
class Linear:
    sigmas: np.ndarray  # (q_hat, n, n)


@dataclass(frozen=True)
class GeneralDiffusion:
    func: Callable[[np.ndarray], np.ndarray]  # (..., n) -> (..., n, q_hat)
    lipschitz: float
    q_hat: int


def lipschitz_of_linear_diffusion(sigmas) -> float:
    """Max over i of the induced infinity norm of sigma_i."""
    sigmas = [np.asarray(s, dtype=float) for s in sigmas]
    if not sigmas:
        raise ValueError("need at least one diffusion matrix")
    n = sigmas[0].shape[0]
    for s in sigmas:
        if s.ndim != 2 or s.shape != (n, n):
            raise ValueError(f"diffusion matrix has shape {s.shape}, expected ({n}, {n})")
    return float(max(np.max(np.sum(np.abs(s), axis=1)) for s in sigmas))


@dataclass(frozen=True)
class ModeDynamics:
    drift: Union[Affine, GeneralDrift]
    diffusion: Union[Linear, GeneralDiffusion]
    lipschitz_diffusion: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.drift, Affine):
            object.__setattr__(self, "drift", Affine(np.asarray(self.drift.A, float),
                                                     np.asarray(self.drift.b, float)))
        if isinstance(self.diffusion, Linear):
            s = np.asarray(self.diffusion.sigmas, dtype=float)
            if s.ndim == 2:
                s = s[None]
            object.__setattr__(self, "diffusion", Linear(s))
            if self.lipschitz_diffusion is None:
                object.__setattr__(self, "lipschitz_diffusion", lipschitz_of_linear_diffusion(s))
        elif self.lipschitz_diffusion is None:
            object.__setattr__(self, "lipschitz_diffusion", float(self.diffusion.lipschitz))

    @classmethod
    def affine(cls, A, b, sigmas, lipschitz_diffusion=None) -> "ModeDynamics":
        return cls(Affine(A, b), Linear(sigmas), lipschitz_diffusion)

    @property
    def is_affine(self) -> bool:
        return isinstance(self.drift, Affine) and isinstance(self.diffusion, Linear)

    @property
    def n(self) -> int:
        if isinstance(self.drift, Affine):
            return self.drift.A.shape[0]
        if isinstance(self.diffusion, Linear):
            return self.diffusion.sigmas.shape[1]
        return -1

    @property
    def q_hat(self) -> int:
        if isinstance(self.diffusion, Linear):
            return self.diffusion.sigmas.shape[0]
        return self.diffusion.q_hat

    def f(self, x: np.ndarray) -> np.ndarray:
        if isinstance(self.drift, Affine):
            return x @ self.drift.A.T + self.drift.b
        return np.asarray(self.drift.func(x), dtype=float)

    def g(self, x: np.ndarray) -> np.ndarray:
        """Diffusion matrix of shape (..., n, q_hat)."""
        if isinstance(self.diffusion, Linear):
            return np.einsum("ijk,...k->...ji", self.diffusion.sigmas, x)
        return np.asarray(self.diffusion.func(x), dtype=float)

    def g_dw(self, x: np.ndarray, dw: np.ndarray) -> np.ndarray:
        """g(x) @ dw for batches x (R, n), dw (R, q_hat)."""
        if isinstance(self.diffusion, Linear):
            out = np.zeros_like(x)
            for i, s in enumerate(self.diffusion.sigmas):
                if np.any(s):
                    out += (x @ s.T) * dw[:, i:i + 1]
            return out
        return np.einsum("rij,rj->ri", self.g(x), dw)

    @property
    def zero_diffusion(self) -> bool:
        if isinstance(self.diffusion, Linear):
            return not np.any(self.diffusion.sigmas)
        return self.lipschitz_diffusion == 0.0


@dataclass(frozen=True)
class SwitchedSystem:
    n: int
    q_hat: int
    modes: tuple
    domain: BoxUnion
    dwell_time: Optional[float] = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))

    @property
    def m(self) -> int:
        return len(self.modes)

    @property
    def all_affine(self) -> bool:
        return all(md.is_affine for md in self.modes)

    @property
    def zero_diffusion(self) -> bool:
        return all(md.zero_diffusion for md in self.modes)


def validate_system(sys: SwitchedSystem, audit_pairs: int = 1000, seed: int = 0) -> list[str]:
    """Return one diagnostic string per violated invariant (empty when valid)."""
    diags = []
    if sys.m == 0:
        diags.append("no modes")
    if sys.domain.num_boxes == 0:
        diags.append("domain is empty")
    elif sys.domain.n != sys.n:
        diags.append(f"domain dimension {sys.domain.n} differs from n={sys.n}")
    else:
        for k, (l, h) in enumerate(zip(sys.domain.lo, sys.domain.hi)):
            if np.any(h - l <= 0):
                diags.append(f"domain box {k} has nonpositive span")
    if sys.dwell_time is not None and not sys.dwell_time > 0:
        diags.append(f"dwell_time must be positive, got {sys.dwell_time}")
    rng = np.random.default_rng(seed)
    for p, md in enumerate(sys.modes, start=1):
        if isinstance(md.drift, Affine):
            if md.drift.A.shape != (sys.n, sys.n) or md.drift.b.shape != (sys.n,):
                diags.append(f"mode {p}: drift dimensions do not match n={sys.n}")
                continue
        if md.q_hat != sys.q_hat:
            diags.append(f"mode {p}: q_hat={md.q_hat} differs from system q_hat={sys.q_hat}")
            continue
        if isinstance(md.diffusion, Linear) and md.diffusion.sigmas.shape[1:] != (sys.n, sys.n):
            diags.append(f"mode {p}: diffusion matrices are not {sys.n}x{sys.n}")
            continue
        if md.lipschitz_diffusion is None or md.lipschitz_diffusion < 0:
            diags.append(f"mode {p}: diffusion Lipschitz constant must be nonnegative")
            continue
        g0 = md.g(np.zeros(sys.n))
        if np.any(g0 != 0):
            diags.append(f"mode {p}: diffusion does not vanish at the origin")
        if sys.domain.num_boxes == 0 or audit_pairs <= 0:
            continue
        # difference-quotient audit with the max-entry norm on n x q_hat matrices
        idx = rng.integers(0, sys.domain.num_boxes, size=(2, audit_pairs))
        u = rng.random((2, audit_pairs, sys.n))
        pts = sys.domain.lo[idx] + u * (sys.domain.hi[idx] - sys.domain.lo[idx])
        dx = np.max(np.abs(pts[0] - pts[1]), axis=-1)
        ok = dx > 0
        dg = np.max(np.abs(md.g(pts[0]) - md.g(pts[1])), axis=(-2, -1))
        quot = np.max(dg[ok] / dx[ok]) if np.any(ok) else 0.0
        if quot > md.lipschitz_diffusion * (1 + 1e-9) + 1e-15:
            diags.append(f"mode {p}: declared diffusion Lipschitz constant "
                         f"{md.lipschitz_diffusion:.17g} is below sampled quotient {quot:.17g}")
    return diags


# ------------------------------------------------------------------ parsing

_SYSTEM_KEYS = {"name", "n", "q_hat", "modes", "domain", "dwell_time"}
_MODE_KEYS = {"name", "A", "b", "sigmas", "lipschitz_diffusion"}


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise SystemFormatError(f"{where}: expected a mapping")
    extra = set(d) - allowed
    if extra:
        raise SystemFormatError(f"{where}: unknown keys {sorted(extra)}")


def system_from_dict(doc: dict) -> SwitchedSystem:
    _check_keys(doc, _SYSTEM_KEYS, "system")
    for k in ("n", "q_hat", "modes", "domain"):
        if k not in doc:
            raise SystemFormatError(f"system: missing key '{k}'")
    n, q_hat = int(doc["n"]), int(doc["q_hat"])
    modes = []
    for i, md in enumerate(doc["modes"] or [], start=1):
        _check_keys(md, _MODE_KEYS, f"mode {i}")
        A = np.array(md["A"], dtype=float)
        b = np.array(md.get("b", [0.0] * n), dtype=float)
        sig = md.get("sigmas")
        sigmas = np.zeros((q_hat, n, n)) if sig is None else np.array(sig, dtype=float)
        if sigmas.ndim != 3:
            raise SystemFormatError(f"mode {i}: sigmas must be a list of matrices")
        z = md.get("lipschitz_diffusion")
        modes.append(ModeDynamics.affine(A, b, sigmas, None if z is None else float(z)))
    dwell = doc.get("dwell_time")
    return SwitchedSystem(n, q_hat, tuple(modes), BoxUnion.from_list(doc["domain"], n),
                          None if dwell is None else float(dwell), str(doc.get("name", "")))


def system_to_dict(sys: SwitchedSystem) -> dict:
    if not sys.all_affine:
        raise ValueError("only affine systems can be written to a description file")
    modes = []
    for md in sys.modes:
        modes.append({"A": md.drift.A.tolist(), "b": md.drift.b.tolist(),
                      "sigmas": md.diffusion.sigmas.tolist(),
                      "lipschitz_diffusion": md.lipschitz_diffusion})
    doc = {"name": sys.name, "n": sys.n, "q_hat": sys.q_hat, "modes": modes,
           "domain": sys.domain.to_list()}
    if sys.dwell_time is not None:
        doc["dwell_time"] = sys.dwell_time
    return doc


def load_system(path) -> SwitchedSystem:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return system_from_dict(doc)


def save_system(sys: SwitchedSystem, path) -> None:
    Path(path).write_text(yaml.safe_dump(system_to_dict(sys), sort_keys=False, default_flow_style=None, width=120))
