import numpy as np
import pytest
import scipy.sparse as sp

from oracles import dense_operator, dense_vec, random_operator
from sglowrank.chaos import build_spectral_basis, build_stochastic_matrices
from sglowrank.fem import assemble_convection_diffusion, assemble_diffusion, make_grid
from sglowrank.lowrank import (
    FactoredVector,
    add,
    build_operator,
    norm,
    residual_norm,
    scale,
)
from sglowrank.pgd import (
    enrich_rank_one,
    handle_nonhomogeneous_bc,
    solve_pgd,
    update_stochastic,
)
from sglowrank.randfield import ExponentialCovariance, build_kl

UNIT = (0.0, 1.0, 0.0, 1.0)
BIG = (-1.0, 1.0, -1.0, 1.0)


def diffusion_operator(level=3, M=3, p=2, sigma=0.1, c=2.0):
    cov = ExponentialCovariance(sigma, c, UNIT)
    kl = build_kl(cov, 1.0, num_modes=M)
    stoch = build_stochastic_matrices(build_spectral_basis(M, p))
    spatial = assemble_diffusion(make_grid(level, UNIT), kl)
    return build_operator(spatial, stoch)


def cd_operator(level=3, M=2, p=2, sigma=0.05, c=8.0, nu=0.1):
    cov = ExponentialCovariance(sigma, c, BIG)
    kl = build_kl(cov, 1.0, num_modes=M)
    stoch = build_stochastic_matrices(build_spectral_basis(M, p))
    spatial, _ = assemble_convection_diffusion(make_grid(level, BIG), kl, nu)
    A = build_operator(spatial, stoch)
    return handle_nonhomogeneous_bc(A, spatial.bc_lift), spatial


class TestEnrichment:
    def test_deterministic_problem_exact_in_one_term(self):
        A = diffusion_operator(sigma=0.0, M=2)
        y, z = enrich_rank_one(A, FactoredVector.zero(*A.shape))
        u = FactoredVector.rank_one(y, z)
        assert residual_norm(A, u) <= 1e-10 * norm(A.rhs)
        # stochastic factor proportional to the first coordinate vector
        assert np.abs(z[1:]).max() <= 1e-12
        assert abs(abs(z[0]) - 1.0) <= 1e-12

    def test_condensed_matrix_matches_dense_galerkin(self, rng):
        A = diffusion_operator(level=3, M=3, p=2)
        from sglowrank.pgd import _spatial_system

        z = rng.standard_normal(A.shape[1])
        z /= np.linalg.norm(z)
        mat, _ = _spatial_system(A, z)
        dense = dense_operator(A)
        n_x, n_xi = A.shape
        # condensation (I (x) z)^T A (I (x) z) in the kron ordering z (x) y
        P = np.kron(z.reshape(-1, 1), np.eye(n_x))
        want = P.T @ dense @ P
        assert np.abs(mat.toarray() - want).max() <= 1e-12 * np.abs(want).max()

    def test_alternation_fixed_point_residuals(self):
        A = diffusion_operator(level=3, M=3, p=2, sigma=0.05, c=4.0)
        current = FactoredVector.zero(*A.shape)
        y, z = enrich_rank_one(A, current, alt_tol=1e-12, max_sweeps=60)
        from sglowrank.pgd import (
            _spatial_rhs,
            _spatial_system,
            _stochastic_rhs,
            _stochastic_system,
        )

        mat, _ = _spatial_system(A, z)
        rhs = _spatial_rhs(A, current, z)
        assert np.linalg.norm(mat @ y - rhs) <= 1e-8 * np.linalg.norm(rhs)
        mat, _ = _stochastic_system(A, y)
        rhs = _stochastic_rhs(A, current, y)
        assert np.linalg.norm(mat @ z - rhs) <= 1e-8 * np.linalg.norm(rhs)

    def test_normalization_convention(self):
        A = diffusion_operator(sigma=0.05)
        y, z = enrich_rank_one(A, FactoredVector.zero(*A.shape))
        assert np.linalg.norm(z) == pytest.approx(1.0, rel=1e-12)


class TestUpdateStochastic:
    def test_kappa_one_reduces_to_half_step(self):
        A = diffusion_operator(sigma=0.05)
        y, z = enrich_rank_one(A, FactoredVector.zero(*A.shape))
        Z = update_stochastic(A, y.reshape(-1, 1))
        from sglowrank.pgd import _stochastic_rhs, _stochastic_system

        mat, _ = _stochastic_system(A, y)
        want = np.linalg.solve(mat.toarray(), _stochastic_rhs(A, FactoredVector.zero(*A.shape), y))
        assert np.abs(Z[:, 0] - want).max() <= 1e-9 * np.abs(want).max()

    def test_matches_dense_block_solve(self, rng):
        A = diffusion_operator(level=2, M=2, p=1, sigma=0.1)
        n_x, n_xi = A.shape
        kappa = 3
        Y = rng.standard_normal((n_x, kappa))
        Z = update_stochastic(A, Y)
        # dense block system: (i, j) block sum_l (y_i^T K_l y_j) G_l
        blocks = np.zeros((kappa * n_xi, kappa * n_xi))
        for G, K in A.terms:
            H = Y.T @ (K @ Y).toarray() if sp.issparse(K @ Y) else Y.T @ (K @ Y)
            blocks += np.kron(H, G.toarray())
        rhs = np.concatenate([(A.rhs.Z @ (A.rhs.Y.T @ Y[:, i])) for i in range(kappa)])
        want = np.linalg.solve(blocks, rhs).reshape(kappa, n_xi)
        assert np.abs(Z - want.T).max() <= 1e-9 * np.abs(want).max()

    def test_update_does_not_worsen_error_spd(self, rng):
        # the update is a Galerkin projection: for SPD operators the energy
        # error cannot grow; the l2 residual may wiggle within a small slack
        for trial in range(20):
            inst = np.random.default_rng(trial)
            A = random_operator(inst, 8, 6, 3)
            dense = dense_operator(A)
            exact = np.linalg.solve(dense, dense_vec(A.rhs))
            u = FactoredVector.zero(8, 6)
            for _ in range(2):
                y, z = enrich_rank_one(A, u, inst)
                u = add(u, FactoredVector.rank_one(y, z))

            def energy_error(vec):
                e = dense_vec(vec) - exact
                return float(e @ (dense @ e))

            before_energy = energy_error(u)
            before_res = residual_norm(A, u)
            updated = FactoredVector(u.Y, update_stochastic(A, u.Y))
            assert energy_error(updated) <= before_energy * (1.0 + 1e-9)
            assert residual_norm(A, updated) <= before_res * 1.05


class TestSolvePgd:
    def test_deterministic_rank_one(self):
        A = diffusion_operator(sigma=0.0, M=3)
        sol = solve_pgd(A, 1e-8)
        assert sol.kappa == 1
        assert sol.converged
        assert sol.rel_residual <= 1e-8

    def test_converges_and_reports(self):
        A = diffusion_operator(level=3, M=3, p=2, sigma=0.1, c=2.0)
        sol = solve_pgd(A, 1e-6)
        assert sol.converged
        assert sol.rel_residual < 1e-6
        assert sol.kappa == sol.factors.rank
        # residuals are checked at rank one and every fifth enrichment
        assert len(sol.residual_history) >= sol.kappa // 5

    def test_rank_lands_on_block_boundaries(self):
        A = diffusion_operator(level=3, M=4, p=2, sigma=0.15, c=2.0)
        sol = solve_pgd(A, 1e-6)
        assert sol.kappa == 1 or sol.kappa % 5 == 0
        fine = solve_pgd(A, 1e-6, residual_every=1)
        assert fine.kappa <= sol.kappa

    def test_monotone_residual_history_spd(self):
        A = diffusion_operator(level=3, M=4, p=2, sigma=0.15, c=2.0)
        sol = solve_pgd(A, 1e-7)
        hist = np.array(sol.residual_history)
        assert np.all(hist[1:] <= hist[:-1] * 1.05)

    def test_basis_orthonormal_and_spans_solution(self):
        A = diffusion_operator(level=3, M=3, p=2, sigma=0.1)
        sol = solve_pgd(A, 1e-6)
        Zc = sol.Zc
        assert np.abs(Zc.T @ Zc - np.eye(Zc.shape[1])).max() < 1e-12
        # projecting the solution onto the basis loses nothing
        from sglowrank.lowrank import truncate_projection

        proj = truncate_projection(sol.factors, Zc)
        diff = norm(add(proj, scale(sol.factors, -1.0)))
        assert diff <= 1e-10 * norm(sol.factors)

    def test_scale_invariance(self):
        A = diffusion_operator(level=3, M=3, p=2, sigma=0.1)
        scaled = type(A)(
            A.terms,
            scale(A.rhs, 10.0),
            symmetric=A.symmetric,
            bc_values=A.bc_values,
        )
        sol = solve_pgd(A, 1e-6)
        sol10 = solve_pgd(scaled, 1e-6)
        assert sol10.kappa == sol.kappa
        # agreement is limited by the iterative update tolerance, not eps_mach
        assert sol10.rel_residual == pytest.approx(sol.rel_residual, rel=1e-2)
        diff = norm(add(sol10.factors, scale(sol.factors, -10.0)))
        assert diff <= 1e-6 * norm(sol10.factors)

    def test_seeded_reproducibility(self):
        A = diffusion_operator(level=3, M=3, p=2, sigma=0.1)
        a = solve_pgd(A, 1e-6, seed=7)
        b = solve_pgd(A, 1e-6, seed=7)
        assert a.kappa == b.kappa
        assert np.array_equal(a.factors.Y, b.factors.Y)
        assert np.array_equal(a.factors.Z, b.factors.Z)

    def test_max_rank_flags_nonconvergence(self):
        A = diffusion_operator(level=3, M=4, p=2, sigma=0.2, c=1.5)
        with pytest.warns(UserWarning, match="PGD stopped"):
            sol = solve_pgd(A, 1e-12, max_rank=3)
        assert not sol.converged
        assert sol.kappa == 3

    def test_update_policy_validation(self):
        A = diffusion_operator()
        with pytest.raises(ValueError):
            solve_pgd(A, 1e-4, update_policy="sometimes")


class TestBoundaryLift:
    def test_homogeneous_problem_unchanged(self):
        A = diffusion_operator()
        out = handle_nonhomogeneous_bc(A, None)
        assert out is A

    def test_reconstruction_satisfies_boundary_values(self):
        A, spatial = cd_operator()
        grid = spatial.grid
        sol = solve_pgd(A, 1e-8)
        from sglowrank.fem import interior_to_full

        mean_field = interior_to_full(
            grid, sol.factors.Y @ sol.factors.Z[0], A.bc_values
        )
        bnd = grid.boundary_indices()
        assert mean_field[bnd] == pytest.approx(A.bc_values[bnd], abs=0)

    def test_lift_alignment_with_dropped_terms(self, rng):
        # a vanishing middle KL matrix must not shift later lift couplings
        from dataclasses import replace

        from sglowrank.chaos import build_spectral_basis, build_stochastic_matrices
        from sglowrank.fem import BoundaryLift
        from sglowrank.lowrank import build_operator

        A_full, spatial = cd_operator(level=2, M=2, p=1)
        zero = sp.csr_matrix(spatial.K[1].shape)
        lift = spatial.bc_lift
        # zero out mode 1 entirely, keep mode 2 and its coupling
        spatial_mod = replace(
            spatial,
            K=(spatial.K[0], zero, spatial.K[2]),
            bc_lift=BoundaryLift(
                lift.values_full,
                (lift.coupling[0], np.zeros_like(lift.coupling[1]), lift.coupling[2]),
            ),
        )
        stoch = build_stochastic_matrices(build_spectral_basis(2, 1))
        A = build_operator(spatial_mod, stoch)
        assert A.num_terms == 2
        assert A.term_index == (0, 2)
        A = handle_nonhomogeneous_bc(A, spatial_mod.bc_lift)
        n_x, n_xi = A.shape
        got = dense_vec(A.rhs)
        # couplings stack per stochastic ordinal: mean at e_1, mode 2 at G_2 e_1
        want_vec = np.zeros(n_x * n_xi)
        want_vec[:n_x] = lift.coupling[0]
        # G_2 e1 hits the ordinal of the degree-1 index in coordinate 2
        pos = stoch.Gl[1][:, 0].nonzero()[0][0]
        coeff = stoch.Gl[1][pos, 0]
        want_vec[pos * n_x : (pos + 1) * n_x] = coeff * lift.coupling[2]
        assert np.abs(got - want_vec).max() <= 1e-12 * np.abs(want_vec).max()

    def test_matches_dense_solve_with_bc(self):
        A, spatial = cd_operator(level=3, M=2, p=2)
        eps = 1e-8
        sol = solve_pgd(A, eps)
        assert sol.converged
        dense = dense_operator(A)
        want = np.linalg.solve(dense, dense_vec(A.rhs))
        got = dense_vec(sol.factors)
        # residual < eps bounds the error through the inverse operator norm
        fnorm = norm(A.rhs)
        bound = eps * fnorm * np.linalg.norm(np.linalg.inv(dense), 2)
        assert np.linalg.norm(got - want) <= bound
