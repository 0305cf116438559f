"""Fixed-point controller synthesis (safety, reach, reach-and-stay) and runtime refinement."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .abstraction import DISABLED, INVALID, PAD, ModelFormatError, model_fingerprint
from .model import BoxUnion

CTRL_MAGIC = b"SYMSWITCH-CONTROLLER"
CTRL_VERSION = 1
CHUNK = 1 << 20


@dataclass(frozen=True)
class Spec:
    kind: str  # "safety" | "reach" | "reach_stay"
    safe: Optional[BoxUnion] = None
    target: Optional[BoxUnion] = None
    avoid: Optional[BoxUnion] = None
    epsilon_contract: bool = True

    def __post_init__(self):
        if self.kind not in ("safety", "reach", "reach_stay"):
            raise ValueError(f"unknown spec kind {self.kind!r}")
        if self.kind == "safety" and self.safe is None:
            raise ValueError("safety spec needs a safe set")
        if self.kind in ("reach", "reach_stay") and self.target is None:
            raise ValueError(f"{self.kind} spec needs a target set")

    def region(self, epsilon: float = 0.0) -> BoxUnion:
        """The set to label, with avoid subtracted and optional contraction."""
        base = self.safe if self.kind == "safety" else self.target
        eps = epsilon if self.epsilon_contract else 0.0
        out = contract_set(base, eps)
        if self.avoid is not None:
            out = out.subtract(self.avoid.inflate(eps) if eps else self.avoid)
        return out

    def as_dict(self) -> dict:
        d = {"kind": self.kind, "epsilon_contract": self.epsilon_contract}
        for k in ("safe", "target", "avoid"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v.to_list()
        return d

    @classmethod
    def from_dict(cls, d: dict, n: Optional[int] = None) -> "Spec":
        allowed = {"kind", "safe", "target", "avoid", "epsilon_contract"}
        extra = set(d) - allowed
        if extra:
            raise ValueError(f"spec: unknown keys {sorted(extra)}")
        sets = {k: BoxUnion.from_list(d[k], n) for k in ("safe", "target", "avoid") if d.get(k) is not None}
        return cls(d["kind"], epsilon_contract=bool(d.get("epsilon_contract", True)), **sets)


def contract_set(S: BoxUnion, epsilon: float) -> BoxUnion:
    """Shrink every box by epsilon on each side; empty boxes are dropped."""
    if epsilon == 0:
        return S
    return S.shrink(epsilon)


def label_states(model, S: BoxUnion, chunk: int = CHUNK) -> np.ndarray:
    """Boolean mask of states whose output lies in S (closed boxes)."""
    mask = np.zeros(model.num_states, dtype=bool)
    if S.num_boxes == 0:
        return mask
    if model.kind == "grid":
        pm = S.contains(model.points)
        reps = model.num_states // model.num_points
        return np.repeat(pm, reps)
    sm = S.contains(model.outputs)
    reps = model.num_states // model.num_sequences
    return np.repeat(sm, reps)


@dataclass
class Controller:
    model_ref: str
    winning: np.ndarray      # bool mask
    strategy: np.ndarray     # int8, -1 outside winning
    spec: dict
    distance: Optional[np.ndarray] = None  # reach distance, -1 where undefined
    core: Optional[np.ndarray] = None

    @property
    def num_winning(self) -> int:
        return int(self.winning.sum())


def _move_ok(model, states, u, W):
    """Input u is enabled at each state and all successors lie in W."""
    succ = model.post(states, u)
    enabled = np.all(succ != DISABLED, axis=1)
    real = succ != PAD
    good = np.where(real, (succ >= 0) & W[np.maximum(succ, 0)], True)
    return enabled & np.all(good, axis=1) & np.any(real, axis=1)


def _sweep(model, W, candidates, allowed):
    """For candidate states, first input (smallest index) with all successors in W."""
    choice = np.full(len(candidates), -1, dtype=np.int8)
    for a in range(0, len(candidates), CHUNK):
        b = min(a + CHUNK, len(candidates))
        st = candidates[a:b]
        ch = choice[a:b]
        for u in range(model.m):
            und = ch < 0
            if not und.any():
                break
            ok = _move_ok(model, st[und], u, allowed)
            sub = np.flatnonzero(und)[ok]
            ch[sub] = u
    return choice


def solve_safety(model, safe: np.ndarray, spec: Optional[dict] = None) -> Controller:
    """Greatest fixed point W = safe cap Pre(W)."""
    W = np.asarray(safe, dtype=bool).copy()
    while True:
        cand = np.flatnonzero(W)
        ch = _sweep(model, W, cand, W)
        lost = cand[ch < 0]
        if len(lost) == 0:
            break
        W[lost] = False
    strategy = np.full(model.num_states, -1, dtype=np.int8)
    cand = np.flatnonzero(W)
    strategy[cand] = _sweep(model, W, cand, W)
    return Controller(model_fingerprint(model), W, strategy, spec or {"kind": "safety"})


def solve_reach(model, target: np.ndarray, spec: Optional[dict] = None,
                inside: Optional[np.ndarray] = None) -> Controller:
    """Least fixed point: states that can force reaching ``target``.

    Shortest strategies with smallest-index tie-break. ``inside`` gives
    predefined moves for target states (used by reach-and-stay).
    """
    R = np.asarray(target, dtype=bool).copy()
    dist = np.where(R, 0, -1).astype(np.int32)
    strategy = np.full(model.num_states, -1, dtype=np.int8)
    if inside is not None:
        strategy[R] = inside[R]
    else:
        tgt = np.flatnonzero(R)
        if len(tgt):
            strategy[tgt] = _first_enabled(model, tgt)
    k = 0
    while True:
        cand = np.flatnonzero(~R)
        if len(cand) == 0:
            break
        ch = _sweep(model, R, cand, R)
        new = ch >= 0
        if not new.any():
            break
        k += 1
        R[cand[new]] = True
        dist[cand[new]] = k
        strategy[cand[new]] = ch[new]
    return Controller(model_fingerprint(model), R, strategy, spec or {"kind": "reach"}, dist)


def _first_enabled(model, states):
    out = np.full(len(states), -1, dtype=np.int8)
    for u in range(model.m):
        und = out < 0
        if not und.any():
            break
        succ = model.post(states[und], u)
        ok = np.all(succ != DISABLED, axis=1)
        out[np.flatnonzero(und)[ok]] = u
    return out


def solve_reach_stay(model, target: np.ndarray, spec: Optional[dict] = None) -> Controller:
    core = solve_safety(model, target)
    ctrl = solve_reach(model, core.winning, spec or {"kind": "reach_stay"}, inside=core.strategy)
    ctrl.core = core.winning
    return ctrl


def synthesize(model, spec: Spec, epsilon: Optional[float] = None) -> Controller:
    eps = model.epsilon if epsilon is None else epsilon
    region = spec.region(eps)
    labels = label_states(model, region)
    sd = spec.as_dict()
    sd["contract_epsilon"] = eps if spec.epsilon_contract else 0.0
    if spec.kind == "safety":
        return solve_safety(model, labels, sd)
    if spec.kind == "reach":
        return solve_reach(model, labels, sd)
    return solve_reach_stay(model, labels, sd)


def closure_violations(model, ctrl: Controller, states: Optional[np.ndarray] = None) -> int:
    """Winning states whose strategy move leaves the winning set (0 when sound)."""
    if states is None:
        states = np.flatnonzero(ctrl.winning)
    bad = 0
    for u in range(model.m):
        st = states[ctrl.strategy[states] == u]
        if len(st):
            bad += int((~_move_ok(model, st, u, ctrl.winning)).sum())
    bad += int((ctrl.strategy[states] < 0).sum())
    return bad


# ------------------------------------------------------------------ runtime

class RuntimeFault(RuntimeError):
    pass


class SequenceRuntime:
    """Finite-state switching logic: state = last N applied modes (+ counter)."""

    def __init__(self, ctrl: Controller, model, initial_state: int):
        if not ctrl.winning[initial_state]:
            raise RuntimeFault("initial abstract state is not winning")
        self.ctrl, self.model = ctrl, model
        self.state = int(initial_state)

    def mode(self) -> int:
        return int(self.ctrl.strategy[self.state])

    def step(self) -> int:
        """Return the mode to apply for the next period and advance the state."""
        u = self.mode()
        if u < 0:
            raise RuntimeFault(f"no strategy at abstract state {self.state}")
        self.state = int(self.model.post(np.array([self.state]), u)[0, 0])
        return u

    def schedule(self, steps: int) -> np.ndarray:
        return np.array([self.step() for _ in range(steps)], dtype=np.int64)


class GridRuntime:
    """Measurement-based switching: nearest lattice point (+ tracked mode and counter)."""

    def __init__(self, ctrl: Controller, model):
        self.ctrl, self.model = ctrl, model

    def start(self, x0) -> tuple:
        """Initial (mode, counter) for a dwell model; the mode for a plain grid."""
        pt = int(self.model.nearest_point(x0)[0])
        if pt < 0:
            raise RuntimeFault("initial state outside the domain")
        if self.model.dwell_steps is None:
            return int(self.ctrl.strategy[pt]), None
        for p in range(self.model.m):
            s = int(self.model.encode(pt, p, 0))
            if self.ctrl.winning[s]:
                return p, 0
        raise RuntimeFault("no winning initial abstract state")

    def modes(self, X, prev_mode=None, counter=None):
        """Vectorized runtime. Returns (mode to apply now, next counter, fault mask, next mode)."""
        pts = self.model.nearest_point(X)
        fault = pts < 0
        ptc = np.maximum(pts, 0)
        if self.model.dwell_steps is None:
            u = self.ctrl.strategy[ptc].astype(np.int64)
            fault |= u < 0
            return np.where(u < 0, 0, u), None, fault, None
        # dwell: the mode for this period is tracked; the strategy fixes the next one
        p = np.asarray(prev_mode, dtype=np.int64)
        i = np.asarray(counter, dtype=np.int64)
        s = self.model.encode(ptc, p, i)
        nxt = self.ctrl.strategy[s].astype(np.int64)
        lost = nxt < 0
        fault |= lost
        nh = self.model.dwell_steps
        # fallback when off the winning set: keep the mode if allowed
        nxt = np.where(lost, p, nxt)
        ni = np.where(nxt == p, np.minimum(i + 1, nh - 1), 0)
        return p, ni, fault, nxt


def refine_controller(ctrl: Controller, model, initial_state: Optional[int] = None):
    if model.kind == "sequence":
        if initial_state is None:
            raise ValueError("sequence refinement needs an initial abstract state")
        return SequenceRuntime(ctrl, model, initial_state)
    return GridRuntime(ctrl, model)


# ---------------------------------------------------------------- file io

def save_controller(ctrl: Controller, path) -> None:
    arrs = [("winning", np.packbits(ctrl.winning.astype(np.uint8), bitorder="little")),
            ("strategy", ctrl.strategy.astype("<i1"))]
    if ctrl.distance is not None:
        arrs.append(("distance", ctrl.distance.astype("<i4")))
    if ctrl.core is not None:
        arrs.append(("core", np.packbits(ctrl.core.astype(np.uint8), bitorder="little")))
    payload = b"".join(a.tobytes() for _, a in arrs)
    header = {"version": CTRL_VERSION, "model_ref": ctrl.model_ref, "spec": ctrl.spec,
              "num_states": int(len(ctrl.winning)), "num_winning": ctrl.num_winning,
              "arrays": [{"name": k, "dtype": a.dtype.str, "shape": list(a.shape)} for k, a in arrs],
              "payload_bytes": len(payload), "sha256": hashlib.sha256(payload).hexdigest()}
    with open(path, "wb") as fh:
        fh.write(CTRL_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_controller(path) -> Controller:
    data = Path(path).read_bytes()
    try:
        magic, rest = data.split(b"\n", 1)
        hdr, payload = rest.split(b"\n", 1)
        header = json.loads(hdr)
    except ValueError as e:
        raise ModelFormatError(f"{path}: malformed header") from e
    if magic != CTRL_MAGIC:
        raise ModelFormatError(f"{path}: not a controller file")
    if header.get("version") != CTRL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version")
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ModelFormatError(f"{path}: checksum mismatch (truncated or corrupted)")
    arrays, off = {}, 0
    for meta in header["arrays"]:
        dt = np.dtype(meta["dtype"])
        cnt = int(np.prod(meta["shape"]))
        arrays[meta["name"]] = np.frombuffer(payload, dt, cnt, off).copy()
        off += cnt * dt.itemsize
    ns = header["num_states"]
    unpack = lambda a: np.unpackbits(a, count=ns, bitorder="little").astype(bool)
    return Controller(header["model_ref"], unpack(arrays["winning"]), arrays["strategy"].astype(np.int8),
                      header["spec"], arrays["distance"].astype(np.int32) if "distance" in arrays else None,
                      unpack(arrays["core"]) if "core" in arrays else None)


def strategy_csv(ctrl: Controller, model, path, winning_only: bool = True) -> None:
    states = np.flatnonzero(ctrl.winning) if winning_only else np.arange(len(ctrl.winning))
    out = model.output(states)
    with open(path, "w") as fh:
        fh.write("state," + ",".join(f"y{i + 1}" for i in range(out.shape[1])) + ",mode\n")
        for a in range(0, len(states), CHUNK):
            b = min(a + CHUNK, len(states))
            block = np.column_stack([states[a:b], out[a:b], ctrl.strategy[states[a:b]] + 1])
            fmt = ["%d"] + ["%.17g"] * out.shape[1] + ["%d"]
            np.savetxt(fh, block, fmt=fmt, delimiter=",")
