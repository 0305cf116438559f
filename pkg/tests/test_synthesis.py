import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from symswitch.abstraction import INVALID, GridModel, ModelFormatError, build_grid, build_seq
from symswitch.casestudies import spiral_system
from symswitch.model import BoxUnion
from symswitch.quantizer import GridParams, SeqParams
from symswitch.synthesis import (GridRuntime, RuntimeFault, SequenceRuntime, Spec, closure_violations,
                                 contract_set, label_states, load_controller, refine_controller,
                                 save_controller, solve_reach, solve_reach_stay, solve_safety,
                                 strategy_csv, synthesize)


def _table_model(succ, nh=None):
    """1-D lattice model with a hand-written successor table (points 0, 1, 2, ...)."""
    succ = np.asarray(succ, dtype=np.int32)
    K = succ.shape[0]
    idx = np.arange(K, dtype=np.int32)[:, None]
    return GridModel(GridParams(1.0, 1.0, 1.0, nh), succ.shape[1], np.array([0]), (K,), idx, succ, 1.0)


def _mask(n, on):
    m = np.zeros(n, dtype=bool)
    m[list(on)] = True
    return m


def test_contract_set():
    S = BoxUnion.box([19] * 6, [22] * 6)
    assert contract_set(S, 0.0) == S
    assert contract_set(S, 1.0) == BoxUnion.box([20] * 6, [21] * 6)
    assert contract_set(BoxUnion.box([0], [1]), 0.6).is_empty()


def test_spec_region_avoid_inflated():
    spec = Spec("safety", safe=BoxUnion.box([-5, -5], [5, 5]), avoid=BoxUnion.box([-1, -1], [1, 1]))
    r = spec.region(0.5)
    assert not r.contains(np.array([[1.4, 0.0]]))[0] and r.contains(np.array([[1.6, 0.0]]))[0]
    assert not r.contains(np.array([[4.6, 0.0]]))[0]
    lit = Spec("safety", safe=spec.safe, avoid=spec.avoid, epsilon_contract=False).region(0.5)
    assert lit.contains(np.array([[4.6, 0.0], [1.0, 0.0]])).all()
    with pytest.raises(ValueError):
        Spec("reach")
    with pytest.raises(ValueError):
        Spec("liveness", target=spec.safe)


def test_label_states():
    sys = spiral_system()
    g = build_grid(sys, GridParams(0.5, 0.25, 1.2))
    assert label_states(g, sys.domain).all()
    assert not label_states(g, BoxUnion.empty(2)).any()


def test_label_states_room_brute_force(room_model):
    S = BoxUnion.box([19] * 6, [22] * 6)
    lab = label_states(room_model, S)
    rng = np.random.default_rng(2)
    s = rng.integers(0, room_model.num_states, 10_000)
    y = room_model.output(s)
    assert np.array_equal(lab[s], np.all((y >= 19) & (y <= 22), axis=1))


def test_safety_trivial_cases():
    g = _table_model([[1], [2], [0]])
    assert solve_safety(g, np.ones(3, bool)).winning.all()
    assert not solve_safety(g, np.zeros(3, bool)).winning.any()
    g2 = _table_model([[1], [INVALID], [0]])
    assert not solve_safety(g2, np.ones(3, bool)).winning.any()


def test_reach_chain_distances():
    g = _table_model([[1], [2], [2]])
    c = solve_reach(g, _mask(3, [2]))
    assert c.winning.all()
    assert list(c.distance) == [2, 1, 0]


def test_reach_isolated_target():
    g = _table_model([[0], [0], [0]])
    c = solve_reach(g, _mask(3, [2]))
    assert list(np.flatnonzero(c.winning)) == [2]


def test_reach_all_target():
    g = _table_model([[1, 2], [2, 0], [0, 1]])
    c = solve_reach(g, np.ones(3, bool))
    assert c.winning.all() and np.all(c.strategy == 0)


def test_reach_stay_needs_invariance():
    # state 2 is reachable but not invariant
    g = _table_model([[1], [2], [0]])
    c = solve_reach_stay(g, _mask(3, [2]))
    assert not c.winning.any()
    # absorbing target: reach-stay equals reach
    g = _table_model([[1], [2], [2]])
    a, b = solve_reach_stay(g, _mask(3, [2])), solve_reach(g, _mask(3, [2]))
    assert np.array_equal(a.winning, b.winning) and np.array_equal(a.core, _mask(3, [2]))


def test_smallest_mode_tie_break():
    g = _table_model([[1, 1], [1, 1]])
    c = solve_safety(g, np.ones(2, bool))
    assert np.all(c.strategy == 0)


def _random_model(rng, K=60, m=3, nh=None):
    succ = rng.integers(-1, K, size=(K, m)).astype(np.int32)
    return _table_model(succ, nh)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([None, 2, 3]))
def test_fixed_point_properties(seed, nh):
    rng = np.random.default_rng(seed)
    g = _random_model(rng, nh=nh)
    safe = rng.random(g.num_states) < 0.8
    c = solve_safety(g, safe)
    assert closure_violations(g, c) == 0
    assert np.all(c.winning <= safe)
    # maximality: adding back any losing safe state breaks closure
    for s in np.flatnonzero(safe & ~c.winning)[:20]:
        W = c.winning.copy()
        W[s] = True
        ok = False
        for u in range(g.m):
            nxt = g.post(np.array([s]), u)[0]
            ok |= bool(np.all((nxt >= 0) & W[np.maximum(nxt, 0)]))
        assert not ok
    tgt = rng.random(g.num_states) < 0.1
    r = solve_reach(g, tgt)
    for s in np.flatnonzero(r.winning & ~tgt):
        nxt = g.post(np.array([s]), int(r.strategy[s]))[0]
        assert np.all(r.distance[nxt] == r.distance[s] - 1)
    r2 = solve_reach(g, tgt)
    assert np.array_equal(r.strategy, r2.strategy)


def test_sequence_runtime_shift():
    sys = spiral_system()
    m = build_seq(sys, SeqParams(0.5, 5, (0.0, 0.0), 1.0))
    ctrl = solve_safety(m, np.ones(m.num_states, bool))
    ctrl.strategy[:] = 0
    start = m.seq_index([1] * 5)
    rt = SequenceRuntime(ctrl, m, start)
    for u in (0, 1, 1):
        ctrl.strategy[rt.state] = u
        assert rt.step() == u
    assert list(m.digits(rt.state)) == [1, 1, 0, 1, 1]


def test_sequence_runtime_rejects_losing_start():
    sys = spiral_system()
    m = build_seq(sys, SeqParams(0.5, 3, (0.0, 0.0), 1.0))
    ctrl = solve_safety(m, np.zeros(m.num_states, bool))
    with pytest.raises(RuntimeFault):
        refine_controller(ctrl, m, 0)


def test_grid_runtime_at_lattice_point():
    sys = spiral_system()
    g = build_grid(sys, GridParams(0.5, 0.25, 1.2))
    spec = Spec("safety", safe=sys.domain, epsilon_contract=False)
    ctrl = synthesize(g, spec)
    rt = GridRuntime(ctrl, g)
    w = np.flatnonzero(ctrl.winning)[:50]
    u, _, fault, _ = rt.modes(g.points[w])
    assert np.array_equal(u, ctrl.strategy[w]) and not fault.any()
    _, _, fault, _ = rt.modes(np.array([[100.0, 100.0]]))
    assert fault[0]


def test_controller_round_trip(tmp_path):
    g = _table_model([[1], [2], [2]])
    c = solve_reach_stay(g, _mask(3, [2]))
    p = tmp_path / "c.bin"
    save_controller(c, p)
    back = load_controller(p)
    assert np.array_equal(back.winning, c.winning) and np.array_equal(back.strategy, c.strategy)
    assert np.array_equal(back.distance, c.distance) and np.array_equal(back.core, c.core)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(ModelFormatError):
        load_controller(p)


def test_strategy_csv(tmp_path):
    g = _table_model([[1], [2], [2]])
    c = solve_reach(g, _mask(3, [2]))
    p = tmp_path / "s.csv"
    strategy_csv(c, g, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "state,y1,mode" and lines[1] == "0,0,1" and len(lines) == 4
