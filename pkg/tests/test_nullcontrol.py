import numpy as np
import pytest

from sctk.nullcontrol import (
    assemble_gramian,
    control_kernel,
    synthesize_control,
    verify_theorem_5_1,
)
from sctk.observability import assemble_forms, forms_from_matrices, optimal_constant
from sctk.systems import HorizonConfig, make_system
from sctk.trees import TreeDriver, build_tree
from tests.conftest import random_system


def martingale(n=1):
    return make_system(
        np.zeros((n, n)), np.eye(n), C=[np.zeros((n, n))], D=[np.zeros((n, n))]
    )


def observable_instance(rng, delta_range=(0.3, 0.7)):
    while True:
        sys_ = random_system(rng, n_max=2, m_max=2, d_max=2)
        delta = float(rng.uniform(*delta_range))
        K = int(rng.integers(3, 5))
        tree = build_tree(TreeDriver.bernoulli(), HorizonConfig(T=1.0, K=K), sys_.d)
        forms = assemble_forms(tree, sys_)
        rep = optimal_constant(forms, delta)
        if rep.observable and rep.c_opt > 0:
            return sys_, tree, forms, delta, rep.c_opt


class TestGramian:
    def test_zero_output_reduces_to_delta_n(self, rng):
        nL = 8
        N_diag = np.full(nL, 1 / nL)
        forms = forms_from_matrices(np.zeros((nL, nL)), np.zeros((nL, nL)), N_diag)
        delta = 0.25
        g = assemble_gramian(forms, c=1.0, delta=delta)
        assert np.allclose(g.G_form, delta * np.diag(N_diag), atol=1e-15)
        # inverse acts as delta^{-1} identity in the weighted geometry and
        # saturates the operator-norm bound
        xi = rng.standard_normal(nL)
        assert np.allclose(g.solve(xi), xi / delta, atol=1e-12)
        assert g.weighted_lambda_min() == pytest.approx(delta, abs=1e-12)

    def test_weighted_floor_near_one(self, rng):
        tree = build_tree(TreeDriver.bernoulli(), HorizonConfig(T=1.0, K=3), 1)
        forms = assemble_forms(tree, martingale())
        delta = 1.0 - 1e-6
        g = assemble_gramian(forms, c=1.0, delta=delta)
        assert g.weighted_lambda_min() >= delta - 1e-10

    def test_weighted_floor_random_forms(self, rng):
        # random PSD output form: weighted lambda_min >= delta
        nL = 10
        W = rng.standard_normal((nL, nL))
        Q = W @ W.T / nL
        N_diag = rng.uniform(0.05, 0.3, nL)
        forms = forms_from_matrices(np.zeros((nL, nL)), Q, N_diag)
        g = assemble_gramian(forms, c=0.7, delta=0.3)
        assert g.weighted_lambda_min() >= 0.3 - 1e-10


class TestSynthesis:
    def test_zero_state_zero_everything(self):
        tree = build_tree(TreeDriver.bernoulli(), HorizonConfig(T=1.0, K=3), 1)
        forms = assemble_forms(tree, martingale())
        res = synthesize_control(tree, martingale(), [0.0], 1.0, 0.5, forms)
        assert not res.f.any()
        assert res.control_energy == 0.0
        assert res.terminal_energy == 0.0

    @pytest.mark.parametrize("delta", [0.2, 0.5, 0.8])
    def test_martingale_closed_form(self, delta):
        # G acts on constants as (c T + delta); with c = 1/T the constant
        # terminal target x_s becomes f = x_s / (1 + delta)
        T, K = 1.0, 4
        tree = build_tree(TreeDriver.bernoulli(), HorizonConfig(T=T, K=K), 1)
        sys_ = martingale()
        forms = assemble_forms(tree, sys_)
        x_s = 1.3
        res = synthesize_control(tree, sys_, [x_s], 1.0 / T, delta, forms)
        assert np.allclose(res.f, x_s / (1 + delta), atol=1e-12)
        expect_term = delta**2 * x_s**2 / (1 + delta) ** 2
        assert res.terminal_energy == pytest.approx(expect_term, rel=1e-12)
        assert res.terminal_energy <= delta * x_s**2
        assert res.all_bounds_hold

    def test_identities_on_random_observable_instances(self, rng):
        for _ in range(8):
            sys_, tree, forms, delta, c_opt = observable_instance(rng)
            x_s = rng.standard_normal(sys_.n)
            res = synthesize_control(tree, sys_, x_s, c_opt, delta, forms,
                                     check_constant=False)
            assert res.terminal_identity_residual < 1e-8
            assert res.energy_identity_residual < 1e-9
            assert res.bounds["terminal_energy"]["holds"]
            assert res.bounds["f_energy"]["holds"]
            # the tree's own growth factor is the exact discrete constant
            assert res.bounds["control_energy"]["holds_tree"]

    def test_invalid_constant_is_rejected(self, rng):
        sys_, tree, forms, delta, c_opt = observable_instance(rng)
        with pytest.raises(ValueError, match="is_delta_observable"):
            synthesize_control(tree, sys_, np.ones(sys_.n), c_opt * 0.5, delta, forms)

    def test_null_controllability_tracks_initial_observability(self, rng):
        # initially observable system: shrinking delta drives the terminal
        # energy to zero accordingly
        found = False
        while not found:
            sys_ = random_system(rng, n_max=2, m_max=2, d_max=1)
            tree = build_tree(TreeDriver.bernoulli(), HorizonConfig(T=1.0, K=3), 1)
            forms = assemble_forms(tree, sys_)
            rep0 = optimal_constant(forms, 0.0)
            found = rep0.observable
        x_s = np.ones(sys_.n)
        for delta in (0.1, 0.01):
            rep = optimal_constant(forms, delta)
            res = synthesize_control(
                tree, sys_, x_s, rep.c_opt, delta, forms, check_constant=False
            )
            assert res.terminal_energy <= delta * float(x_s @ x_s) + 1e-12


class TestKernel:
    def test_scalar_kernel_column_is_the_basis_control(self):
        tree = build_tree(TreeDriver.bernoulli(), HorizonConfig(T=1.0, K=3), 1)
        sys_ = martingale()
        forms = assemble_forms(tree, sys_)
        ker = control_kernel(tree, sys_, 1.0, 0.5, forms)
        res = synthesize_control(tree, sys_, [1.0], 1.0, 0.5, forms)
        for k in range(tree.K):
            assert np.allclose(ker.gains[k][:, :, 0], res.u.values[k], atol=1e-14)

    def test_kernel_reproduces_synthesis_linearly(self, rng):
        sys_, tree, forms, delta, c_opt = observable_instance(rng)
        ker = control_kernel(tree, sys_, c_opt * 1.000001, delta, forms)
        for _ in range(5):
            x_s = rng.standard_normal(sys_.n)
            res = synthesize_control(
                tree, sys_, x_s, c_opt * 1.000001, delta, forms, check_constant=False
            )
            uk = ker.control_field(x_s)
            dev = max(
                np.abs(uk.values[k] - res.u.values[k]).max() for k in range(tree.K)
            )
            assert dev < 1e-10

    def test_zero_state_zero_control(self, rng):
        sys_, tree, forms, delta, c_opt = observable_instance(rng)
        ker = control_kernel(tree, sys_, c_opt * 1.000001, delta, forms)
        u0 = ker.control_field(np.zeros(sys_.n))
        assert all(not layer.any() for layer in u0.values)


class TestTheorem51:
    def test_martingale_both_directions(self):
        rep = verify_theorem_5_1(martingale(), HorizonConfig(T=1.0, K=4), 0.5)
        assert rep.applicable
        assert rep.forward_pass
        assert rep.converse_pass
        assert rep.both_directions_pass

    def test_no_output_not_applicable(self):
        sys_ = make_system(
            [[0.0]], [[0.0]], C=[[[0.0]]], D=[[[0.0]]]
        )
        rep = verify_theorem_5_1(sys_, HorizonConfig(T=1.0, K=2), 0.5)
        assert not rep.applicable
        assert not rep.both_directions_pass

    def test_s2_at_published_point(self, corpus):
        rep = verify_theorem_5_1(corpus["S2"], HorizonConfig(T=1.0, K=6), 0.6)
        assert rep.applicable
        assert rep.forward_pass
        assert rep.converse_pass

    def test_cost_never_exceeds_synthesis_bound(self, rng):
        for _ in range(5):
            sys_, tree, forms, delta, c_opt = observable_instance(rng)
            rep = verify_theorem_5_1(
                sys_, HorizonConfig(T=tree.T, K=tree.K), delta
            )
            if rep.applicable:
                assert rep.cost_vs_bound_ratio <= 1.0 + 1e-9
