"""Finite symbolic models: lattice grids and mode-sequence (shift) models.

Both kinds expose the same interface used by synthesis:

* ``num_states``, ``m`` (number of inputs)
* ``post(states, u)`` -> (B, w) successor array with INVALID / DISABLED / PAD codes
* ``output(states)`` -> (B, n) output points
* ``applied_mode(states, u)`` -> mode active during the transition
* ``initial_mask()``
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from .certificates import CertificateSet
from .flow import DEFAULT_FLOW, FlowConfig, nominal_flow
from .model import BoxUnion, SwitchedSystem
from .quantizer import GridParams, SeqParams

INVALID = -1   # flow leaves the domain: losing sink
DISABLED = -2  # input not allowed by the dwell counter
PAD = -3       # unused slot in a nondeterministic successor list

FORMAT_VERSION = 1
_MAGIC = {"grid": b"SYMSWITCH-MODEL grid", "sequence": b"SYMSWITCH-MODEL sequence"}


class ModelFormatError(ValueError):
    pass


class CapacityError(MemoryError):
    """The requested model exceeds the configured size cap."""


def _counter_next(p, i, u, nh):
    """Dwell counter update; returns (enabled, new counter)."""
    same = u == p
    enabled = same | (i == nh - 1)
    new_i = np.where(same, np.minimum(i + 1, nh - 1), 0)
    return enabled, new_i


# ===================================================================== grid

class GridModel:
    kind = "grid"

    def __init__(self, params: GridParams, m: int, kmin: np.ndarray, kshape: tuple,
                 idx: np.ndarray, succ: np.ndarray, epsilon: float, meta: Optional[dict] = None):
        self.params = params
        self.m = m
        self.eta = params.eta
        self.kmin = np.asarray(kmin, dtype=np.int64)
        self.kshape = tuple(int(v) for v in kshape)
        self.idx = idx               # (K, n) int32 lattice indices
        self.succ = succ             # (K, m) or (K, m, w) int32 point successors
        self.epsilon = float(epsilon)
        self.meta = dict(meta or {})
        self.dwell_steps = params.dwell_steps
        self.points = idx.astype(float) * self.eta
        flat = np.ravel_multi_index(tuple((idx - self.kmin).T), self.kshape) if len(idx) else np.zeros(0, np.int64)
        self._dense = np.full(int(np.prod(self.kshape)), -1, dtype=np.int32)
        self._dense[flat] = np.arange(len(idx), dtype=np.int32)

    @property
    def n(self) -> int:
        return self.idx.shape[1]

    @property
    def num_points(self) -> int:
        return self.idx.shape[0]

    @property
    def num_states(self) -> int:
        if self.dwell_steps is None:
            return self.num_points
        return self.num_points * self.m * self.dwell_steps

    @property
    def nondeterministic(self) -> bool:
        return self.succ.ndim == 3

    def decode(self, s):
        s = np.asarray(s, dtype=np.int64)
        if self.dwell_steps is None:
            return s, None, None
        nh = self.dwell_steps
        i = s % nh
        rest = s // nh
        return rest // self.m, rest % self.m, i

    def encode(self, pt, p=None, i=None):
        pt = np.asarray(pt, dtype=np.int64)
        if self.dwell_steps is None:
            return pt
        return (pt * self.m + np.asarray(p)) * self.dwell_steps + np.asarray(i)

    def output(self, s) -> np.ndarray:
        return self.points[self.decode(s)[0]]

    def point_successors(self, pt, p) -> np.ndarray:
        out = self.succ[pt, p]
        return out[:, None] if out.ndim == 1 else out

    def post(self, s, u) -> np.ndarray:
        """Successor states under input u (for dwell models u is the next mode)."""
        s = np.asarray(s, dtype=np.int64)
        pt, p, i = self.decode(s)
        if self.dwell_steps is None:
            return self.point_successors(pt, u).astype(np.int64)
        nxt = self.point_successors(pt, p).astype(np.int64)
        enabled, ni = _counter_next(p, i, u, self.dwell_steps)
        out = np.where(nxt >= 0, self.encode(np.maximum(nxt, 0), u, ni[:, None]), nxt)
        out[~enabled] = DISABLED
        return out

    def applied_mode(self, s, u):
        if self.dwell_steps is None:
            return np.broadcast_to(np.asarray(u), np.shape(s))
        return self.decode(s)[1]

    def initial_mask(self) -> np.ndarray:
        if self.dwell_steps is None:
            return np.ones(self.num_states, dtype=bool)
        mask = np.zeros(self.num_states, dtype=bool)
        mask[np.arange(self.num_states) % self.dwell_steps == 0] = True
        return mask

    def nearest_point(self, x) -> np.ndarray:
        """Index of the nearest lattice point in the model (-1 if none within eta)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return _nearest(x, self.eta, self.kmin, self.kshape, self._dense)


def _nearest(y, eta, kmin, kshape, dense):
    k = np.floor(y / eta + 0.5).astype(np.int64)
    rel = k - kmin
    hi = np.asarray(kshape) - 1
    inside = np.all((rel >= 0) & (rel <= hi), axis=1)
    relc = np.clip(rel, 0, hi)
    flat = np.ravel_multi_index(tuple(relc.T), kshape)
    cand = dense[flat]
    dist = np.max(np.abs(y - (relc + kmin) * eta), axis=1)
    ok = (cand >= 0) & (dist <= eta)
    # a clipped index is only a fallback: the exact nearest point must be used when it exists
    ok &= inside | (dist <= eta)
    return np.where(ok, cand, INVALID).astype(np.int32)


def _within_eta_all(y, eta, kmin, kshape, dense):
    """All lattice points within eta of each row of y; (B, 3^n) padded."""
    B, n = y.shape
    lo = np.ceil((y - eta) / eta - 1e-12).astype(np.int64)
    out = np.full((B, 3 ** n), PAD, dtype=np.int32)
    hi = np.asarray(kshape) - 1
    for c, off in enumerate(itertools.product(range(3), repeat=n)):
        k = lo + np.asarray(off)
        valid = np.all(np.abs(k * eta - y) <= eta * (1 + 1e-12), axis=1)
        rel = k - kmin
        inside = np.all((rel >= 0) & (rel <= hi), axis=1)
        flat = np.ravel_multi_index(tuple(np.clip(rel, 0, hi).T), kshape)
        cand = np.where(inside, dense[flat], INVALID)
        out[:, c] = np.where(valid, np.where(cand >= 0, cand, INVALID), PAD)
    return out


def lattice(domain: BoxUnion, eta: float, cap: int = 50_000_000):
    """Lattice points eta*Z^n inside the domain, row-major over lattice indices."""
    blo, bhi = domain.bounding_box()
    kmin = np.ceil(blo / eta - 1e-9).astype(np.int64)
    kmax = np.floor(bhi / eta + 1e-9).astype(np.int64)
    kshape = tuple(int(v) for v in (kmax - kmin + 1))
    total = float(np.prod(np.asarray(kshape, dtype=float)))
    if total > cap:
        raise CapacityError(f"lattice bounding box has {total:.4g} points, cap is {cap}")
    grids = np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(kmin, kmax)], indexing="ij")
    idx = np.stack([g.ravel() for g in grids], axis=1)
    idx = idx[domain.contains(idx * eta)]
    return kmin, kshape, idx.astype(np.int32)


def build_grid(sys: SwitchedSystem, params: GridParams, epsilon: Optional[float] = None,
               cfg: FlowConfig = DEFAULT_FLOW, all_successors: bool = False,
               cap: int = 200_000_000, chunk: int = 1 << 18) -> GridModel:
    """Grid abstraction with nearest-lattice-point successors (or all within eta)."""
    eta = params.eta
    if eta > sys.domain.span():
        raise ValueError(f"eta={eta} exceeds the domain span {sys.domain.span()}")
    kmin, kshape, idx = lattice(sys.domain, eta, cap)
    states = len(idx) * sys.m * (params.dwell_steps or 1)
    if states > cap:
        raise CapacityError(f"grid model would have {states} states, cap is {cap}")
    model = GridModel(params, sys.m, kmin, kshape, idx,
                      np.zeros((0, sys.m), np.int32), params.epsilon if epsilon is None else epsilon,
                      {"system": sys.name, "all_successors": all_successors})
    pts = model.points
    w = 3 ** sys.n
    succ = np.empty((len(idx), sys.m, w) if all_successors else (len(idx), sys.m), dtype=np.int32)
    for a in range(0, len(idx), chunk):
        b = min(a + chunk, len(idx))
        for p in range(sys.m):
            y = nominal_flow(pts[a:b], p, params.tau, sys, cfg)
            if all_successors:
                succ[a:b, p] = _within_eta_all(y, eta, kmin, kshape, model._dense)
            else:
                succ[a:b, p] = _nearest(y, eta, kmin, kshape, model._dense)
    model.succ = succ
    return model


def build_grid_dwell(sys: SwitchedSystem, params: GridParams, epsilon: Optional[float] = None,
                     cfg: FlowConfig = DEFAULT_FLOW, **kw) -> GridModel:
    if params.dwell_steps is None:
        raise ValueError("dwell grid needs dwell_steps")
    return build_grid(sys, params, epsilon, cfg, **kw)


def audit_grid(model: GridModel, sys: SwitchedSystem, cfg: FlowConfig = DEFAULT_FLOW,
               chunk: int = 1 << 18) -> dict:
    """Check every stored transition lands within eta of the nominal flow."""
    worst, count = 0.0, 0
    for a in range(0, model.num_points, chunk):
        b = min(a + chunk, model.num_points)
        for p in range(model.m):
            y = nominal_flow(model.points[a:b], p, model.params.tau, sys, cfg)
            s = model.point_successors(np.arange(a, b), p)
            valid = s >= 0
            d = np.max(np.abs(model.points[np.maximum(s, 0)] - y[:, None, :]), axis=-1)
            d = np.where(valid, d, 0.0)
            worst = max(worst, float(d.max()) if d.size else 0.0)
            count += int(valid.sum())
    return {"transitions": count, "max_defect": worst, "ok": worst <= model.eta * (1 + 1e-12)}


# ================================================================= sequence

class SequenceModel:
    kind = "sequence"

    def __init__(self, params: SeqParams, m: int, outputs: np.ndarray, epsilon: float,
                 meta: Optional[dict] = None):
        self.params = params
        self.m = m
        self.N = params.N
        self.outputs = outputs
        self.epsilon = float(epsilon)
        self.dwell_steps = params.dwell_steps
        self.meta = dict(meta or {})
        self._tail = m ** (self.N - 1)

    @property
    def n(self) -> int:
        return self.outputs.shape[1]

    @property
    def num_sequences(self) -> int:
        return self.m ** self.N

    @property
    def num_states(self) -> int:
        return self.num_sequences * (self.dwell_steps or 1)

    @property
    def nondeterministic(self) -> bool:
        return False

    def decode(self, s):
        s = np.asarray(s, dtype=np.int64)
        if self.dwell_steps is None:
            return s, None
        return s // self.dwell_steps, s % self.dwell_steps

    def encode(self, seq, i=None):
        seq = np.asarray(seq, dtype=np.int64)
        if self.dwell_steps is None:
            return seq
        return seq * self.dwell_steps + np.asarray(i)

    def digits(self, seq) -> np.ndarray:
        """Mode sequences (0-based, oldest first) of shape (B, N)."""
        seq = np.asarray(seq, dtype=np.int64)
        pw = self.m ** np.arange(self.N - 1, -1, -1, dtype=np.int64)
        return (seq[..., None] // pw) % self.m

    def seq_index(self, modes) -> int:
        v = 0
        for p in modes:
            v = v * self.m + int(p)
        return v

    def shift(self, seq, u):
        return (np.asarray(seq, dtype=np.int64) % self._tail) * self.m + u

    def output(self, s) -> np.ndarray:
        return self.outputs[self.decode(s)[0]]

    def post(self, s, u) -> np.ndarray:
        seq, i = self.decode(s)
        nxt = self.shift(seq, u)
        if self.dwell_steps is None:
            return nxt[:, None]
        enabled, ni = _counter_next(seq % self.m, i, u, self.dwell_steps)
        out = self.encode(nxt, ni)
        out = np.where(enabled, out, DISABLED)
        return out[:, None]

    def applied_mode(self, s, u):
        return np.broadcast_to(np.asarray(u), np.shape(s))

    def initial_states(self) -> np.ndarray:
        if self.dwell_steps is None:
            return np.arange(self.num_states, dtype=np.int64)
        seq = np.arange(self.num_sequences, dtype=np.int64)
        ok, counter = dwell_initial_filter(self.digits_iter(seq), self.dwell_steps)
        return self.encode(seq[ok], counter[ok])

    def digits_iter(self, seq):
        for j in range(self.N):
            yield (seq // self.m ** (self.N - 1 - j)) % self.m

    def initial_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_states, dtype=bool)
        mask[self.initial_states()] = True
        return mask


def dwell_initial_filter(digit_columns, nh: int):
    """Run-length rule: every run except the last has length >= nh.

    Returns (ok mask, counter = min(last run - 1, nh - 1)).
    """
    prev = None
    for d in digit_columns:
        if prev is None:
            run = np.ones(d.shape, dtype=np.int64)
            ok = np.ones(d.shape, dtype=bool)
        else:
            same = d == prev
            ok &= same | (run >= nh)
            run = np.where(same, run + 1, 1)
        prev = d
    return ok, np.minimum(run - 1, nh - 1)


def sequence_outputs(sys: SwitchedSystem, x_s, N: int, tau: float, cfg: FlowConfig = DEFAULT_FLOW,
                     threads: int = 1) -> np.ndarray:
    """Flows from x_s along every mode sequence, by traversal of the mode tree.

    Each level applies one flow step per node; subtrees under the first mode
    are processed independently and concatenated in mode order.
    """
    x_s = np.asarray(x_s, dtype=float)
    first = [nominal_flow(x_s[None], p, tau, sys, cfg) for p in range(sys.m)]

    def subtree(X):
        for _ in range(N - 1):
            X = np.stack([nominal_flow(X, p, tau, sys, cfg) for p in range(sys.m)], axis=1)
            X = X.reshape(-1, sys.n)
        return X

    if threads > 1 and sys.m > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(subtree, first))
    else:
        parts = [subtree(X) for X in first]
    return np.concatenate(parts, axis=0)


def build_seq(sys: SwitchedSystem, params: SeqParams, epsilon: Optional[float] = None,
              cfg: FlowConfig = DEFAULT_FLOW, cap: int = 1 << 26, threads: int = 1) -> SequenceModel:
    if params.N < 1:
        raise ValueError("N must be >= 1")
    count = sys.m ** params.N * (params.dwell_steps or 1)
    if count > cap:
        raise CapacityError(f"sequence model would have {count} states, cap is {cap}")
    out = sequence_outputs(sys, params.x_s, params.N, params.tau, cfg, threads)
    return SequenceModel(params, sys.m, out, params.epsilon if epsilon is None else epsilon,
                         {"system": sys.name})


def build_seq_dwell(sys: SwitchedSystem, params: SeqParams, epsilon: Optional[float] = None,
                    cfg: FlowConfig = DEFAULT_FLOW, **kw) -> SequenceModel:
    if params.dwell_steps is None:
        raise ValueError("dwell sequence model needs dwell_steps")
    return build_seq(sys, params, epsilon, cfg, **kw)


def sequence_defects(model: SequenceModel, sys: SwitchedSystem, cfg: FlowConfig = DEFAULT_FLOW,
                     chunk: int = 1 << 18) -> np.ndarray:
    """One-step defects |flow(H(x), u) - H(shift(x, u))|, shape (m^N, m)."""
    tau = model.params.tau
    out = np.empty((model.num_sequences, model.m))
    for a in range(0, model.num_sequences, chunk):
        b = min(a + chunk, model.num_sequences)
        seq = np.arange(a, b, dtype=np.int64)
        for u in range(model.m):
            y = nominal_flow(model.outputs[a:b], u, tau, sys, cfg)
            out[a:b, u] = np.max(np.abs(y - model.outputs[model.shift(seq, u)]), axis=1)
    return out


def eta_bar_exact(model: SequenceModel, sys: SwitchedSystem, cfg: FlowConfig = DEFAULT_FLOW) -> float:
    """Exact worst one-step defect over all (state, input) pairs."""
    return float(sequence_defects(model, sys, cfg).max())


# ============================================================ initial states

def initial_abstract_states(model, x0, epsilon: float, certs: CertificateSet,
                            deltas=None) -> np.ndarray:
    """Initial abstract states whose output is within the relation radius of x0.

    Without dwell the radius is (alpha_hi^-1(alpha_lo(eps^q)))^(1/q). With
    dwell it is (alpha_hi_p^-1(delta_i))^(1/q) for the state's mode p and
    counter i; ``deltas`` defaults to delta_0 for every counter.
    """
    q = certs.q
    x0 = np.asarray(x0, dtype=float)
    d0 = certs.alpha_lo(epsilon ** q)
    if model.kind == "grid":
        pts = np.arange(model.num_points)
        dist = np.max(np.abs(model.points - x0), axis=1)
        if model.dwell_steps is None:
            r = certs.alpha_hi_inv(d0) ** (1 / q)
            return np.flatnonzero(dist <= r)
        res = []
        for p in range(model.m):
            r = certs.per_mode[p].alpha_hi_inv(d0) ** (1 / q)
            ok = pts[dist <= r]
            res.append(model.encode(ok, p, 0))
        return np.sort(np.concatenate(res))
    if model.dwell_steps is None:
        dist = np.max(np.abs(model.outputs - x0), axis=1)
        r = certs.alpha_hi_inv(d0) ** (1 / q)
        return np.flatnonzero(dist <= r)
    init = model.initial_states()
    seq, i = model.decode(init)
    dist = np.max(np.abs(model.outputs[seq] - x0), axis=1)
    dl = np.full(model.dwell_steps, d0) if deltas is None else np.asarray(deltas, float)
    chi = np.array([c.alpha_hi_coeff for c in certs.per_mode])
    r = (dl[i] / chi[seq % model.m]) ** (1 / q)
    return init[dist <= r]


# =============================================================== file format

def _array_meta(arrs):
    return [{"name": k, "dtype": v.dtype.newbyteorder("<").str, "shape": list(v.shape)} for k, v in arrs]


def _params_dict(params) -> dict:
    d = dict(params.__dict__)
    if "x_s" in d:
        d["x_s"] = list(d["x_s"])
    return d


def save_model(model, path) -> None:
    if model.kind == "grid":
        arrs = [("kmin", model.kmin.astype("<i8")), ("idx", model.idx.astype("<i4")),
                ("succ", model.succ.astype("<i4"))]
        extra = {"kshape": list(model.kshape), "m": model.m}
    else:
        arrs = [("outputs", model.outputs.astype("<f8"))]
        extra = {"m": model.m}
    payload = b"".join(np.ascontiguousarray(a).tobytes() for _, a in arrs)
    header = {"version": FORMAT_VERSION, "kind": model.kind, "params": _params_dict(model.params),
              "epsilon": model.epsilon, "meta": model.meta, "arrays": _array_meta(arrs),
              "num_states": int(model.num_states), "payload_bytes": len(payload),
              "sha256": hashlib.sha256(payload).hexdigest(), **extra}
    with open(path, "wb") as fh:
        fh.write(_MAGIC[model.kind] + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def _read_container(path, magic_prefix: bytes):
    data = Path(path).read_bytes()
    try:
        magic, rest = data.split(b"\n", 1)
        hdr, payload = rest.split(b"\n", 1)
        header = json.loads(hdr)
    except ValueError as e:
        raise ModelFormatError(f"{path}: malformed header") from e
    if not magic.startswith(magic_prefix):
        raise ModelFormatError(f"{path}: not a {magic_prefix.decode()} file")
    if header.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {header.get('version')}")
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ModelFormatError(f"{path}: checksum mismatch (truncated or corrupted)")
    arrays, off = {}, 0
    for meta in header["arrays"]:
        dt = np.dtype(meta["dtype"])
        cnt = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arrays[meta["name"]] = np.frombuffer(payload, dt, cnt, off).reshape(meta["shape"]).astype(dt.newbyteorder("="))
        off += cnt * dt.itemsize
    return magic, header, arrays


def load_model(path):
    magic, header, arrays = _read_container(path, b"SYMSWITCH-MODEL")
    kind = header["kind"]
    if kind == "grid":
        params = GridParams(**header["params"])
        return GridModel(params, header["m"], arrays["kmin"], tuple(header["kshape"]), arrays["idx"],
                         arrays["succ"], header["epsilon"], header["meta"])
    if kind == "sequence":
        params = SeqParams(**header["params"])
        return SequenceModel(params, header["m"], arrays["outputs"], header["epsilon"], header["meta"])
    raise ModelFormatError(f"unknown model kind {kind}")


def model_fingerprint(model) -> str:
    h = hashlib.sha256()
    h.update(model.kind.encode())
    h.update(json.dumps(_params_dict(model.params), sort_keys=True).encode())
    if model.kind == "grid":
        h.update(model.idx.tobytes())
        h.update(model.succ.tobytes())
    else:
        h.update(model.outputs.tobytes())
    return h.hexdigest()
