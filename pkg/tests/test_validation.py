import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from symswitch.abstraction import build_grid, build_seq, eta_bar_exact, initial_abstract_states
from symswitch.casestudies import SPIRAL_X0, spiral_certificates, spiral_system
from symswitch.certificates import build_certificates
from symswitch.model import BoxUnion, ModeDynamics, SwitchedSystem
from symswitch.quantizer import GridParams, SeqParams
from symswitch.synthesis import GridRuntime, SequenceRuntime, Spec, solve_safety, synthesize
from symswitch.validation import (check_bisim_sample, estimate_eta_hat, hoeffding_halfwidth,
                                  hoeffding_samples, monte_carlo_closed_loop)


def test_hoeffding_formula():
    assert hoeffding_samples(1.0, 0.95, 0.1) == 185 == math.ceil(math.log(40) / 0.02)
    # width 10.3 (span of the room validation set) with accuracy back-solved from the sample count
    assert hoeffding_samples(10.3, 1 - 1e-5, 0.093444) == 74152
    with pytest.raises(ValueError):
        hoeffding_samples(1.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        hoeffding_samples(0.0, 0.9, 0.1)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.1, 20), st.floats(0.5, 0.999999), st.floats(0.001, 1.0))
def test_hoeffding_properties(w, c, a):
    n = hoeffding_samples(w, c, a)
    assert hoeffding_halfwidth(w, c, n) <= a * (1 + 1e-12)
    if n > 1:
        assert hoeffding_halfwidth(w, c, n - 1) > a * (1 - 1e-12)
    n2 = hoeffding_samples(w, c, 2 * a)
    assert abs(n / 4 - n2) <= 1


def _stable_scalar(noise=0.0):
    md = ModeDynamics.affine([[-0.5]], [0.5 * 3.0], [[[noise]]])
    return SwitchedSystem(1, 1, (md,), BoxUnion.box([-10], [10]))


def test_zero_noise_distance_decreases():
    sys = _stable_scalar()
    g = build_grid(sys, GridParams(0.5, 0.1, 1.0))
    ctrl = solve_safety(g, np.ones(g.num_states, bool))
    W = BoxUnion.box([2.9], [3.1])
    rep = monte_carlo_closed_loop(sys, GridRuntime(ctrl, g), [-8.0], 20.0, 0.5, 50, 0, W)
    d = rep.mean_distance
    assert np.all(np.diff(d) <= 1e-12) and d[-1] < 1e-3 and d[0] == pytest.approx(10.9)
    assert rep.stderr.max() <= 1e-12


def test_report_reproducible_and_thread_independent():
    sys = spiral_system()
    g = build_grid(sys, GridParams(0.5, 0.05, 1.2))
    ctrl = synthesize(g, Spec("safety", safe=sys.domain, epsilon_contract=False))
    W = sys.domain
    a = monte_carlo_closed_loop(sys, GridRuntime(ctrl, g), SPIRAL_X0, 5.0, 0.5, 600, 3, W, threads=1)
    b = monte_carlo_closed_loop(sys, GridRuntime(ctrl, g), SPIRAL_X0, 5.0, 0.5, 600, 3, W, threads=2)
    assert a.to_csv() == b.to_csv()
    assert a.summary() == b.summary()


def test_eta_hat_zero_noise_equals_exact():
    sys = spiral_system(sigma=0.0)
    certs = build_certificates(sys, [np.diag([2.0, 1.0]), np.diag([1.0, 2.0])])
    model = build_seq(sys, SeqParams(0.5, 6, (0.3, -0.2), 1.0))
    est = estimate_eta_hat(model, sys, certs, 100, 0)
    assert est.eta_hat == eta_bar_exact(model, sys)
    assert est.half_width == 0.0


def _rotating(sigma):
    # common certificate P = I: the skew parts cancel
    modes = [ModeDynamics.affine([[-1.0, w], [-w, -1.0]], [w, 1.0], sigma * np.eye(2)[:, None] * np.eye(2))
             for w in (1.0, 2.0)]
    return SwitchedSystem(2, 2, tuple(modes), BoxUnion.box([-5, -5], [5, 5]))


def test_eta_hat_noisy_small():
    sys = _rotating(0.05)
    certs = build_certificates(sys, [np.eye(2)])
    model = build_seq(sys, SeqParams(0.5, 6, (0.3, -0.2), 1.0))
    est = estimate_eta_hat(model, sys, certs, 2000, 1, top_k=3)
    det = eta_bar_exact(model, sys)
    assert len(est.pairs) == 3
    assert est.eta_hat >= 0.5 * det
    assert est.eta_hat <= est.analytic_bound + est.half_width
    again = estimate_eta_hat(model, sys, certs, 2000, 1, top_k=3)
    assert again.eta_hat == est.eta_hat


def test_bisim_zero_noise_relation():
    sys = _rotating(0.0)
    certs = build_certificates(sys, [np.eye(2)], alpha_lo=1.0, alpha_hi=1.0)
    model = build_seq(sys, SeqParams(0.5, 8, (0.0, 0.0), 1.0))
    eps = 2 * eta_bar_exact(model, sys) / (1 - math.exp(-certs.kappa * 0.5)) + 1e-9
    s0 = 17
    chk = check_bisim_sample(sys, model, certs, [(model.output(np.array([s0]))[0], s0)], 20, 4, 0,
                             sequences=3, epsilon=eps)
    assert chk.ok and chk.max_ratio <= 1.0


def test_bisim_sample_spiral_dwell(spiral, spiral_certs):
    from symswitch.abstraction import build_seq_dwell
    from symswitch.quantizer import certified_epsilon_sequence
    x_s = (0.0, 0.0)
    N = 16
    model = build_seq_dwell(spiral, SeqParams(0.5, N, x_s, 1.0, 4))
    eps = certified_epsilon_sequence(N, 0.5, x_s, spiral_certs, spiral, 2.0)
    init = model.initial_states()[::5000][:3]
    pairs = [(model.output(np.array([s]))[0], int(s)) for s in init]
    chk = check_bisim_sample(spiral, model, spiral_certs, pairs, 30, 200, 5, epsilon=eps)
    assert chk.ok
