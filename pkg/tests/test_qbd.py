import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iot_uplink.errors import ConditioningError, ConvergenceError, DomainError, TruncationError
from iot_uplink.qbd import (PhaseMatrices, assemble_qbd, build_scul_phase_matrices, compute_R,
                            WAIT_MAX_LEVELS, closed_form_metrics, mean_queue_length_scul, raul_chain, scalar_phase_matrices, solve_nu,
                            stability_margin, stationary_nu, steady_state, wait_moments_scul, waiting_time_scul)
from instances import random_stable_scul
from oracles import geo_geo1, mean_se, ratio_se, simulate_qbd_chains, truncated_qbd, wait_pmf_backward

probs = st.floats(0.0, 1.0)


def _rows_of(blocks):
    return np.hstack([blocks.A2, blocks.A1, blocks.A0]).sum(axis=1)


class TestPhaseMatrices:
    def test_deterministic_single_slot(self):
        pm = build_scul_phase_matrices(1, 1, 1, 1)
        assert np.array_equal(pm.S, [[0, 1], [0, 0]])
        assert np.array_equal(pm.G, [[0, 0], [1, 0]])

    def test_two_slot_stencil(self):
        pm = build_scul_phase_matrices(0.5, 1.0, 0.7, 2)
        assert np.allclose(pm.S, [[0.5, 0.5, 0], [0, 0, 0.3], [0.3, 0, 0]], atol=1e-15)
        assert np.allclose(pm.G, [[0, 0, 0], [0, 0, 0.7], [0.7, 0, 0]], atol=1e-15)

    @given(probs, probs, probs, st.integers(1, 12))
    def test_rows_conserve_mass_and_sparsity(self, p_ra, p_aval, p_tx, n):
        pm = build_scul_phase_matrices(p_ra, p_aval, p_tx, n)
        assert np.allclose((pm.S + pm.G).sum(axis=1), 1.0, atol=1e-12)
        assert not pm.G[0].any()
        allowed = np.zeros((n + 1, n + 1), dtype=bool)
        allowed[0, :2] = True
        for i in range(1, n + 1):
            allowed[i, (i + 1) % (n + 1)] = True
        assert not (pm.S[~allowed]).any() and not (pm.G[~allowed]).any()

    @pytest.mark.parametrize("args", [(1.2, 1, 1, 1), (1, -0.1, 1, 1), (1, 1, 1, 0), (1, 1, 1, 1.5)])
    def test_rejects_bad_inputs(self, args):
        with pytest.raises(DomainError):
            build_scul_phase_matrices(*args)

    def test_rejects_superstochastic(self):
        with pytest.raises(DomainError):
            PhaseMatrices(np.array([[0.6]]), np.array([[0.6]]))
        with pytest.raises(DomainError):
            PhaseMatrices(np.eye(2), np.eye(3))


class TestAssemble:
    def test_no_arrivals_gives_zero_up_block(self):
        blocks = assemble_qbd(0.0, build_scul_phase_matrices(0.5, 1, 0.7, 2))
        assert not blocks.A0.any()

    def test_saturated_arrivals_give_zero_down_block(self):
        blocks = assemble_qbd(1.0, build_scul_phase_matrices(0.5, 1, 0.7, 2))
        assert not blocks.A2.any()

    @given(probs, probs, probs, probs, st.integers(1, 8))
    def test_rows_are_stochastic(self, a, p_ra, p_aval, p_tx, n):
        blocks = assemble_qbd(a, build_scul_phase_matrices(p_ra, p_aval, p_tx, n))
        assert blocks.B + blocks.C.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(_rows_of(blocks), 1.0, atol=1e-12)
        boundary = blocks.E + (blocks.A1 + blocks.A0).sum(axis=1)
        assert np.allclose(boundary, 1.0, atol=1e-12)


class TestComputeR:
    def test_zero_up_block(self):
        blocks = assemble_qbd(0.0, build_scul_phase_matrices(0.5, 1, 0.7, 2))
        for method in ("natural", "logred"):
            assert not compute_R(blocks, method=method).any()

    @pytest.mark.parametrize("method", ["natural", "logred"])
    def test_scalar_closed_form(self, method):
        R = compute_R(assemble_qbd(0.1, scalar_phase_matrices(0.5)), method=method)
        assert R[0, 0] == pytest.approx(1 / 9, abs=1e-9)

    def test_random_blocks_residual_and_methods_agree(self):
        rng = np.random.default_rng(11)
        eps = 1e-12
        for _ in range(30):
            inst = random_stable_scul(rng, max_slots=3, max_radius=0.95)
            b = inst.blocks
            for method in ("natural", "logred"):
                R = compute_R(b, eps=eps, method=method)
                resid = R - (b.A0 + R @ b.A1 + R @ R @ b.A2)
                assert np.max(np.abs(resid)) < 10 * eps
                assert (R >= 0).all()
            nat = compute_R(b, eps=1e-14, method="natural")
            assert np.allclose(nat, inst.R, atol=1e-10)

    def test_unstable_chain_is_rejected(self):
        blocks = assemble_qbd(0.6, scalar_phase_matrices(0.5))
        with pytest.raises(ConvergenceError):
            compute_R(blocks, max_iter=2000)
        with pytest.raises(ConvergenceError):
            compute_R(blocks, method="logred")

    def test_bad_arguments(self):
        blocks = assemble_qbd(0.1, scalar_phase_matrices(0.5))
        with pytest.raises(DomainError):
            compute_R(blocks, eps=0.0)
        with pytest.raises(DomainError):
            compute_R(blocks, method="cyclic")


class TestNu:
    def test_certain_grant(self):
        assert np.allclose(stationary_nu(1.0, 1.0, 3), 0.25)

    def test_never_granted(self):
        assert np.array_equal(stationary_nu(0.0, 0.7, 3), [1, 0, 0, 0])

    def test_matches_linear_solve(self):
        nu = stationary_nu(0.5, 0.5, 2)
        assert np.allclose(nu, [2 / 3, 1 / 6, 1 / 6], atol=1e-15)
        pm = build_scul_phase_matrices(0.5, 0.5, 0.8, 2)
        b = assemble_qbd(0.2, pm)
        assert np.allclose(solve_nu(b.A0 + b.A1 + b.A2), nu, atol=1e-14)

    @given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.floats(0.01, 1.0), probs, st.integers(1, 8))
    def test_closed_form_is_stationary(self, p_ra, p_aval, p_tx, a, n):
        b = assemble_qbd(a, build_scul_phase_matrices(p_ra, p_aval, p_tx, n))
        A = b.A0 + b.A1 + b.A2
        nu = stationary_nu(p_ra, p_aval, n)
        assert nu.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(nu @ A, nu, atol=1e-12)

    def test_reducible_matrix_is_singular(self):
        with pytest.raises(ConditioningError):
            solve_nu(np.eye(2))


class TestStabilityMargin:
    @given(probs, probs, probs, st.integers(1, 6))
    def test_no_arrivals_never_negative(self, p_ra, p_aval, p_tx, n):
        pm = build_scul_phase_matrices(p_ra, p_aval, p_tx, n)
        assert stability_margin(stationary_nu(p_ra, p_aval, n), 0.0, pm) >= 0.0

    @given(probs, probs)
    def test_scalar_reduces_to_service_minus_arrival(self, a, p):
        assert stability_margin(np.ones(1), a, scalar_phase_matrices(p)) == pytest.approx(p - a, abs=1e-15)

    @pytest.mark.parametrize("a,p_tx,stable", [(0.1, 0.5, True), (0.3, 0.5, False)])
    def test_sign_matches_simulated_drift(self, a, p_tx, stable):
        pm = build_scul_phase_matrices(1.0, 1.0, p_tx, 1)
        margin = stability_margin(stationary_nu(1.0, 1.0, 1), a, pm)
        assert (margin > 0) == stable
        rng = np.random.default_rng(5)
        S, G = pm.S, pm.G
        cum = np.cumsum(np.hstack([S, G]), axis=1)
        level, phase = np.zeros(400, int), np.zeros(400, int)
        for _ in range(3000):
            busy = level > 0
            pick = (rng.random(400)[:, None] > cum[phase]).sum(axis=1)
            departs = busy & (pick >= 2)
            phase = np.where(busy, pick % 2, phase)
            level = level - departs + (rng.random(400) < a)
            phase = np.where(level == 0, 0, phase)
        # stable chains stay near their stationary mean; unstable ones grow linearly
        assert (level.mean() < 20) == stable


class TestSteadyState:
    def test_geo_geo1_idle_probability(self):
        blocks = assemble_qbd(0.1, scalar_phase_matrices(0.5))
        ss = steady_state(blocks, compute_R(blocks))
        assert ss.x0 == pytest.approx(0.8, abs=1e-9)

    def test_empty_system(self):
        pm = build_scul_phase_matrices(0.5, 1, 0.7, 2)
        blocks = assemble_qbd(0.0, pm)
        ss = steady_state(blocks, compute_R(blocks))
        assert ss.x0 == 1.0 and not ss.phi.any()

    def test_small_instance_matches_truncated_chain(self):
        pm = build_scul_phase_matrices(1, 1, 1, 1)
        blocks = assemble_qbd(0.3, pm)
        ss = steady_state(blocks, compute_R(blocks, eps=1e-14))
        x0, levels = truncated_qbd(blocks.B, blocks.C, blocks.E, blocks.A0, blocks.A1, blocks.A2, 200)
        assert ss.x0 == pytest.approx(x0, abs=1e-8)
        assert np.allclose(ss.x1, levels[0], atol=1e-8)

    def test_random_instances_match_truncated_chain(self):
        rng = np.random.default_rng(3)
        for _ in range(8):
            inst = random_stable_scul(rng)
            ss = steady_state(inst.blocks, inst.R)
            b = inst.blocks
            x0, levels = truncated_qbd(b.B, b.C, b.E, b.A0, b.A1, b.A2, 200)
            assert ss.x0 == pytest.approx(x0, abs=1e-8)
            assert np.allclose(ss.phi, levels.sum(axis=0), atol=1e-8)
            assert np.allclose(ss.level(3), levels[2], atol=1e-8)
            assert ss.balance_residual < 1e-9

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_normalisation_and_nonnegativity(self, seed):
        inst = random_stable_scul(np.random.default_rng(seed), max_radius=0.98)
        ss = steady_state(inst.blocks, inst.R)
        total = ss.x0 + ss.x1 @ np.linalg.solve(np.eye(len(ss.x1)) - ss.R, np.ones(len(ss.x1)))
        assert total == pytest.approx(1.0, abs=1e-9)
        assert ss.x0 >= 0 and (ss.x1 >= -1e-15).all() and (ss.phi >= -1e-15).all()
        assert ss.balance_residual < 1e-9

    def test_singular_boundary_raises(self):
        blocks = assemble_qbd(0.1, scalar_phase_matrices(0.5))
        with pytest.raises(ConditioningError):
            steady_state(blocks, np.array([[1.0]]))


class TestMeanQueue:
    def test_empty(self):
        blocks = assemble_qbd(0.0, build_scul_phase_matrices(0.5, 1, 0.7, 3))
        assert mean_queue_length_scul(steady_state(blocks, compute_R(blocks))) == 0.0

    def test_geo_geo1_embedding(self):
        blocks = assemble_qbd(0.1, scalar_phase_matrices(0.5))
        assert mean_queue_length_scul(steady_state(blocks, compute_R(blocks))) == pytest.approx(0.025, abs=1e-9)

    def test_matches_level_sum(self):
        rng = np.random.default_rng(8)
        for _ in range(6):
            inst = random_stable_scul(rng)
            b = inst.blocks
            _, levels = truncated_qbd(b.B, b.C, b.E, b.A0, b.A1, b.A2, 200)
            direct = float(np.arange(200) @ levels.sum(axis=1))
            assert mean_queue_length_scul(steady_state(b, inst.R)) == pytest.approx(direct, abs=1e-8)


class TestWaitingTime:
    def test_geo_geo1_mean(self):
        blocks = assemble_qbd(0.1, scalar_phase_matrices(0.5))
        m = waiting_time_scul(steady_state(blocks, compute_R(blocks, eps=1e-14)), scalar_phase_matrices(0.5),
                              tail_eps=1e-13)
        assert m.wait_mean == pytest.approx(0.45, abs=1e-9)

    def test_light_load_waits_nothing(self):
        pm = build_scul_phase_matrices(0.9, 1, 0.9, 3)
        blocks = assemble_qbd(1e-6, pm)
        m = waiting_time_scul(steady_state(blocks, compute_R(blocks)), pm)
        assert m.wait_pmf.probs[0] > 1 - 1e-5

    def test_matches_backward_recursion(self):
        rng = np.random.default_rng(21)
        for _ in range(5):
            inst = random_stable_scul(rng, max_slots=4)
            ss = steady_state(inst.blocks, inst.R)
            m = waiting_time_scul(ss, inst.pm, tail_eps=1e-12)
            j_max = min(25, len(m.wait_pmf.probs) - 1)
            levels = np.array([ss.level(v) for v in range(1, j_max + 1)])
            ref = wait_pmf_backward(levels, ss.x0, inst.pm.S, inst.pm.G, j_max)
            assert np.allclose(m.wait_pmf.probs[:j_max + 1], ref, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_pmf_mass_and_dispersion(self, seed):
        inst = random_stable_scul(np.random.default_rng(seed), max_radius=0.95)
        m = waiting_time_scul(steady_state(inst.blocks, inst.R), inst.pm)
        pmf = m.wait_pmf
        assert (pmf.probs >= -1e-15).all()
        assert pmf.probs.sum() + pmf.tail_mass == pytest.approx(1.0, abs=1e-9)
        if m.wait_mean > 0:
            assert m.dispersion == pytest.approx(m.wait_var / m.wait_mean, rel=1e-12)
        assert m.mean_queue_len >= 0

    def test_horizon_exhaustion_raises(self):
        pm = build_scul_phase_matrices(0.9, 1, 0.9, 3)
        blocks = assemble_qbd(0.2, pm)
        with pytest.raises(TruncationError):
            waiting_time_scul(steady_state(blocks, compute_R(blocks)), pm, j_max=2)

    def test_pmf_close_to_chain_simulation(self):
        # a representative operating point: request success 0.77, full availability, N = 3
        pm = build_scul_phase_matrices(0.774, 1.0, 0.5465, 3)
        blocks = assemble_qbd(0.1, pm)
        ss = steady_state(blocks, compute_R(blocks, method="logred"))
        m = waiting_time_scul(ss, pm, tail_eps=1e-12)
        sim = simulate_qbd_chains(0.1, pm.S, pm.G, 1000, 1000, 1000, np.random.default_rng(99))
        hist = np.bincount(sim["waits"]) / len(sim["waits"])
        size = max(len(hist), len(m.wait_pmf.probs))
        tv = 0.5 * np.abs(np.pad(hist, (0, size - len(hist))) - np.pad(m.wait_pmf.probs, (0, size - len(m.wait_pmf.probs)))).sum()
        assert tv < 0.01
        x0, se = mean_se(sim["x0"])
        assert abs(x0 - ss.x0) < 4 * se
        wm, se = ratio_se(sim["wait_sum"], sim["arrivals"])
        assert abs(wm - m.wait_mean) < 4 * se


class TestClosedFormMoments:
    def test_geo_geo1(self):
        pm = scalar_phase_matrices(0.5)
        blocks = assemble_qbd(0.1, pm)
        mean, var = wait_moments_scul(steady_state(blocks, compute_R(blocks, eps=1e-14)), pm)
        ref = geo_geo1(0.1, 0.5)
        assert mean == pytest.approx(0.45, abs=1e-12)
        assert mean == pytest.approx(ref["wait_mean"], rel=1e-12)

    def test_agrees_with_pmf_moments(self):
        rng = np.random.default_rng(5)
        for _ in range(40):
            inst = random_stable_scul(rng, max_radius=0.97)
            ss = steady_state(inst.blocks, inst.R)
            m = waiting_time_scul(ss, inst.pm, tail_eps=1e-13)
            mean, var = wait_moments_scul(ss, inst.pm)
            assert mean == pytest.approx(m.wait_mean, rel=1e-8, abs=1e-12)
            assert var == pytest.approx(m.wait_var, rel=1e-8, abs=1e-12)

    def test_metrics_without_pmf(self):
        inst = random_stable_scul(np.random.default_rng(8))
        ss = steady_state(inst.blocks, inst.R)
        m = closed_form_metrics(ss, inst.pm)
        assert m.wait_pmf is None
        assert m.mean_queue_len == mean_queue_length_scul(ss)
        assert m.dispersion == pytest.approx(m.wait_var / m.wait_mean, rel=1e-12)

    def test_near_critical_pmf_is_refused_quickly(self):
        pm = build_scul_phase_matrices(0.8, 1.0, 0.6, 3)
        nu = stationary_nu(0.8, 1.0, 3)
        # put the load just under the drift boundary
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = (lo + hi) / 2
            lo, hi = (mid, hi) if stability_margin(nu, mid, pm) > 0 else (lo, mid)
        blocks = assemble_qbd(lo - 2e-5, pm)
        ss = steady_state(blocks, compute_R(blocks, method="logred"))
        assert np.max(np.abs(np.linalg.eigvals(ss.R))) ** WAIT_MAX_LEVELS > 1e-10
        with pytest.raises(TruncationError, match="levels"):
            waiting_time_scul(ss, pm)
        mean, _ = wait_moments_scul(ss, pm)
        assert mean > 100


class TestRaulChain:
    def test_closed_forms(self):
        g = raul_chain(0.1, 0.5, tail_eps=1e-13)
        assert g.stable
        assert (g.x0, g.R) == pytest.approx((0.8, 1 / 9), abs=1e-12)
        assert g.metrics.mean_queue_len == pytest.approx(0.025, abs=1e-12)
        assert g.metrics.wait_mean == pytest.approx(0.45, abs=1e-12)

    def test_no_traffic(self):
        g = raul_chain(0.0, 0.3)
        assert g.x0 == 1.0 and g.metrics.wait_mean == 0 and g.metrics.mean_queue_len == 0
        assert g.metrics.dispersion == 0

    def test_certain_service(self):
        g = raul_chain(0.4, 1.0)
        assert (g.x0, g.R, g.metrics.mean_queue_len) == (0.6, 0.0, 0.0)

    @pytest.mark.parametrize("a,p", [(0.5, 0.5), (0.6, 0.4), (1.0, 1.0)])
    def test_unstable_is_flagged(self, a, p):
        g = raul_chain(a, p)
        assert not g.stable and g.metrics is None

    def test_grid_agrees_with_matrix_path(self):
        for a in np.arange(0.05, 0.46, 0.1):
            for p in np.arange(a + 0.05, 0.951, 0.1):
                ref = geo_geo1(a, p)
                pm = scalar_phase_matrices(p)
                blocks = assemble_qbd(a, pm)
                R = compute_R(blocks, eps=1e-14, method="logred")
                ss = steady_state(blocks, R)
                m = waiting_time_scul(ss, pm, tail_eps=1e-13)
                g = raul_chain(a, p, tail_eps=1e-13)
                assert R[0, 0] == pytest.approx(ref["R"], abs=1e-8)
                assert ss.x0 == pytest.approx(ref["x0"], abs=1e-8)
                assert m.mean_queue_len == pytest.approx(ref["mean_queue"], abs=1e-8)
                assert m.wait_mean == pytest.approx(ref["wait_mean"], abs=1e-8)
                assert np.allclose(g.metrics.wait_pmf.probs[:20], m.wait_pmf.probs[:20], atol=1e-10)

    @given(st.floats(0.0, 0.9), st.floats(0.05, 1.0))
    def test_pmf_is_normalised(self, a, p):
        g = raul_chain(a, p)
        if g.stable:
            pmf = g.metrics.wait_pmf
            assert pmf.probs.sum() + pmf.tail_mass == pytest.approx(1.0, abs=1e-9)
            assert (pmf.probs >= 0).all()
