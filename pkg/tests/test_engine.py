from __future__ import annotations

import copy
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from udna.directions import SchemeParams, node_direction
from udna.engine import (
    PRESETS,
    AlgoConfig,
    DivergenceError,
    comm_rounds,
    descent_coefficients,
    init_run,
    make_config,
    max_stepsize,
    potential,
    potential_weight,
    preset,
    run,
    step,
)
from udna.network import (
    Graph,
    MixingMatrix,
    PolySpec,
    SpectralConstants,
    build_graph,
    metropolis_weights,
    mix_sum,
    path_graph,
)
from udna.problems import quadratic_problem, synthetic_problem

SC3 = SpectralConstants(2 / 3, 2 / 3, 1.0, 2 / 3, 1.0)


class TestPresets:
    def test_table(self):
        a, b, c, d, scheme = preset("non-atc-gt")
        assert b.is_identity and d.is_identity and scheme == "identity"
        assert preset("dqn")[1].coefficients == (0.0, 0.0, 1.0)
        a, b, c, d, scheme = preset("udna2")
        assert scheme == "bfgs" and all(p.coefficients == (0.0, 1.0) for p in (a, b, c, d))

    def test_parametrized_bb(self):
        specs = preset("dgm-bb-c(3)")
        assert specs[4] == "bb" and all(p.degree == 3 for p in specs[:4])

    def test_unknown(self):
        with pytest.raises(ValueError):
            preset("gt")

    def test_auto_refused_for_dqn(self):
        with pytest.raises(ValueError):
            make_config("dqn")
        assert make_config("dqn", alpha=0.01).scheme.experimental


class TestRounds:
    @pytest.mark.parametrize(
        "name,rounds",
        [("non-atc-gt", 2), ("atc-gt", 2), ("semi-atc-gt", 2), ("udna3", 2), ("dsg", 2), ("dqn", 3), ("dgm-bb-c(4)", 8)],
    )
    def test_per_preset(self, name, rounds):
        assert comm_rounds(make_config(name, alpha=0.1)) == rounds

    def test_volume(self):
        # Five nodes on a cycle: five edges.
        g = Graph(5, frozenset({(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)}))
        prob = synthetic_problem(0, 5, 10, m=50)
        res = run(make_config("non-atc-gt", max_iters=100), prob, metropolis_weights(g))
        assert res.state.volume == 10_000

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=4), st.lists(st.floats(0, 1), min_size=1, max_size=4))
    def test_joint_evaluation(self, ca, cb):
        ca = np.array(ca) + 1e-3
        cb = np.array(cb) + 1e-3
        A = PolySpec(tuple(ca / ca.sum()), "A")
        B = PolySpec(tuple(cb / cb.sum()), "B")
        w = metropolis_weights(build_graph(6, 0.5, seed=1))
        rng = np.random.default_rng(0)
        x, d = rng.standard_normal((2, 6, 3))
        out, rounds = mix_sum(w, (A, x), (B, d))
        expect = A.matrix(w) @ x + B.matrix(w) @ d
        np.testing.assert_allclose(out, expect, rtol=1e-12, atol=1e-12)
        assert rounds == max(A.degree, B.degree)


class TestStepSize:
    def test_hand_value(self):
        alpha = max_stepsize(SC3, 1.0, 3, 1.0, 1.0)
        expected = min((5 / 9) * (5 / 9) ** 2 * 3 / 64, (5 / 9) / 29, (5 / 9) * 3 / 2)
        assert alpha == pytest.approx(expected, rel=1e-14)
        assert alpha == pytest.approx(0.0080375, abs=1e-6)

    def test_psi_scaling(self):
        a1 = max_stepsize(SC3, 1.0, 3, 1.0, 1.0)
        a2 = max_stepsize(SC3, 1.0, 3, 1.0, 2.0)
        assert a2 == pytest.approx(a1 / 4, rel=1e-14)

    def test_sigma_a_limit(self):
        sc = SpectralConstants(0.5, 1 - 1e-9, 1.0, 0.5, 1.0)
        assert max_stepsize(sc, 1.0, 3, 1.0, 1.0) < 1e-8

    def test_sigma_d_zero_warns(self):
        sc = SpectralConstants(0.5, 0.5, 1.0, 0.5, 0.0)
        with pytest.warns(RuntimeWarning):
            alpha = max_stepsize(sc, 1.0, 3, 1.0, 1.0)
        assert alpha == pytest.approx(0.75 / 29)

    @given(
        st.floats(0, 0.99), st.floats(0, 1), st.floats(0, 0.99), st.floats(0.01, 1),
        st.floats(0.1, 10), st.integers(1, 20), st.floats(0.05, 1), st.floats(1, 20),
    )
    def test_coefficients_hold_at_bound(self, sa, sb, scc, sd, L, n, psi, Psi):
        sc = SpectralConstants(0.5, sa, sb, scc, sd)
        alpha = max_stepsize(sc, L, n, psi, Psi)
        c = descent_coefficients(sc, L, n, alpha, psi, Psi)
        assert c.a1 >= psi / (4 * n) * (1 - 1e-12)
        assert c.a2 >= (1 - sa**2) * (1 - scc**2) ** 2 / (64 * L**2 * sd**2) * (1 - 1e-12)
        assert c.a3 >= (1 - sa**2) / 2 * (1 - 1e-12)
        assert c.gamma > 0


class TestCoefficients:
    def test_hand_a1(self):
        alpha = max_stepsize(SC3, 1.0, 3, 1.0, 1.0)
        c = descent_coefficients(SC3, 1.0, 3, alpha, 1.0, 1.0)
        assert c.a1 == pytest.approx(1 / 6 - 29 * alpha / (4 * 3 * 5 / 9), rel=1e-14)
        assert c.a1 == pytest.approx(0.13170, abs=1e-5)

    def test_small_alpha_limit(self):
        c = descent_coefficients(SC3, 1.0, 3, 1e-14, 1.0, 1.0)
        assert c.a1 == pytest.approx(1 / 6) and c.a3 == pytest.approx(5 / 9)

    def test_second_term_gives_quarter(self):
        psi, Psi, n, L = 0.5, 2.0, 4, 1.0
        sc = SpectralConstants(0.5, 0.5, 1.0, 0.5, 1.0)
        alpha = (1 - 0.25) * psi / ((2 * L + n + 8 * n) * Psi**2)
        c = descent_coefficients(sc, L, n, alpha, psi, Psi, check=False)
        assert c.a1 == pytest.approx(psi / (4 * n), rel=1e-12)

    def test_potential_weight(self):
        # Substituting both auxiliary parameters into the weight gives 25/936.
        assert potential_weight(SC3, 1.0) == pytest.approx(25 / 936, rel=1e-14)

    def test_potential_consensual(self, rng):
        x = np.tile(rng.standard_normal(3), (4, 1))
        v = np.tile(rng.standard_normal(3), (4, 1))
        P, F, cons, track = potential(1.25, x, v, SC3, 1.0)
        assert P == 1.25 and cons == 0.0 and track == 0.0


class TestInitAndStep:
    def test_init(self):
        prob = synthetic_problem(2, 4, 5, m=40)
        w = metropolis_weights(path_graph(4))
        st_ = init_run(make_config("udna1"), prob, w)
        np.testing.assert_array_equal(st_.v, st_.g)
        assert np.all(st_.x == 0)

    def test_init_at_stationary_point(self):
        prob = synthetic_problem(5, 3, 4, kind="quadratic")
        z = np.array(prob.metadata["z_star"])
        st_ = init_run(make_config("non-atc-gt"), prob, metropolis_weights(path_graph(3)), x0=z)
        assert np.linalg.norm(st_.v.mean(axis=0)) <= 1e-10

    def test_single_node_is_gradient_descent(self, rng):
        prob = synthetic_problem(1, 1, 4, m=20)
        w = MixingMatrix(np.ones((1, 1)))
        cfg = make_config("non-atc-gt", alpha=0.1)
        st_ = init_run(cfg, prob, w, x0=rng.standard_normal(4))
        for _ in range(5):
            x, g = st_.x.copy(), st_.g.copy()
            step(st_, cfg, prob, w, 0.1)
            np.testing.assert_allclose(st_.x, x - 0.1 * g, rtol=1e-14, atol=1e-15)

    @pytest.mark.parametrize("name", ["udna1", "udna2", "udna3", "udna4", "dsg", "dgm-bb-c(2)"])
    def test_single_node_quasi_newton(self, name):
        prob = synthetic_problem(1, 1, 4, m=20)
        w = MixingMatrix(np.ones((1, 1)))
        cfg = make_config(name, alpha=0.05)
        st_ = init_run(cfg, prob, w)
        for _ in range(6):
            x, g = st_.x.copy(), st_.g[0].copy()
            d = node_direction(cfg.scheme, copy.deepcopy(st_.memory[0]), g)
            step(st_, cfg, prob, w, 0.05)
            np.testing.assert_array_equal(st_.v, st_.g)
            np.testing.assert_allclose(st_.x[0], x[0] + 0.05 * d, rtol=1e-13, atol=1e-15)

    def test_divergence(self):
        Q = [np.diag([1.0, 1.0])] * 2
        prob = quadratic_problem(Q, [np.ones(2)] * 2)
        w = metropolis_weights(path_graph(2))
        cfg = make_config("non-atc-gt", alpha=1e200, max_iters=50)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = run(cfg, prob, w)
            assert res.status == "diverged"
            with pytest.raises(DivergenceError):
                run(cfg, prob, w, raise_on_divergence=True)

    def test_dimension_mismatch(self):
        prob = synthetic_problem(0, 3, 2, m=9)
        with pytest.raises(ValueError):
            init_run(make_config("udna1"), prob, metropolis_weights(path_graph(4)))


class TestRun:
    @pytest.mark.parametrize("name", [p for p in PRESETS if p not in ("dgm-bb-c(K)",)])
    def test_tracking_identity(self, name):
        prob = synthetic_problem(3, 5, 6, m=60)
        w = metropolis_weights(build_graph(5, 0.6, seed=2))
        cfg = make_config(name, alpha=0.02 if name == "dqn" else "auto", max_iters=60)
        gaps = []
        run(cfg, prob, w, callback=lambda s: gaps.append(s.tracking_gap() / (1 + np.linalg.norm(s.g.mean(axis=0)))))
        assert max(gaps) <= 1e-10

    def test_record_every(self):
        prob = synthetic_problem(0, 3, 3, m=30)
        w = metropolis_weights(path_graph(3))
        res = run(make_config("udna1", max_iters=25, record_every=4), prob, w)
        assert [r.t for r in res.trace] == [0, 4, 8, 12, 16, 20, 24, 25]
        assert len(res.trace) == math.ceil(25 / 4) + 1

    def test_stop_tol(self):
        prob = synthetic_problem(0, 3, 3, kind="quadratic")
        w = metropolis_weights(path_graph(3))
        res = run(make_config("atc-gt", max_iters=100_000, stop_tol=1e-12), prob, w)
        assert res.status == "converged" and res.trace[-1].eps_stat <= 1e-12

    def test_deterministic(self):
        prob = synthetic_problem(4, 4, 5, m=40)
        w = metropolis_weights(build_graph(4, 0.7, seed=4))
        a = run(make_config("udna2", max_iters=40), prob, w)
        b = run(make_config("udna2", max_iters=40), prob, w)
        assert [r.row() for r in a.trace] == [r.row() for r in b.trace]

    def test_certificates_within_bounds(self):
        prob = synthetic_problem(4, 4, 5, m=40)
        w = metropolis_weights(build_graph(4, 0.7, seed=4))
        res = run(make_config("udna4", max_iters=200), prob, w)
        c = res.certificates
        assert c["observed_lower"] >= res.psi and c["observed_upper"] <= res.Psi

    def test_custom_config(self):
        prob = synthetic_problem(0, 3, 3, m=30)
        w = metropolis_weights(path_graph(3))
        cfg = AlgoConfig((0.5, 0.5), (1.0,), (0.0, 1.0), (0.0, 0.0, 1.0), SchemeParams(), max_iters=10)
        assert not cfg.merged_tracking and comm_rounds(cfg) == 3
        res = run(cfg, prob, w)
        assert res.status == "max_iters" and res.rounds == 3
