"""Proper Generalized Decomposition solver for Kronecker-sum systems.

Builds a separated solution sum_i y_i z_i^T one rank-one pair at a time.
Each enrichment alternates between two Galerkin-condensed problems: freezing
the stochastic factor z gives a spatial system

    (sum_l (z^T G_l z) K_l) y = mat(F) z - sum_l K_l Y (Z^T G_l z),

and freezing the spatial factor y gives a stochastic system

    (sum_l (y^T K_l y) G_l) z = mat(F)^T y - sum_l G_l Z (Y^T K_l^T y).

After enrichment, an update pass re-solves all stochastic factors at once
through the coupled block system with (i, j) block sum_l (y_i^T K_l y_j) G_l,
solved iteratively with a mean-block preconditioner.

The orthonormal stochastic basis extracted from the converged solution by a
factored SVD is the input of the projection truncation operator used by the
fine-grid solver.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .lowrank import (
    FactoredVector,
    StochasticOperator,
    add,
    norm,
    residual_norm,
    truncate_svd,
)

__all__ = [
    "PgdSolution",
    "enrich_rank_one",
    "update_stochastic",
    "solve_pgd",
    "handle_nonhomogeneous_bc",
]

#: relative change of the rank-one increment at which alternation stops
ALTERNATION_TOL = 1e-2
#: sweep cap per enrichment; the update pass repairs cheap pairs
MAX_SWEEPS = 10
#: restarts with random initialization before giving up on an enrichment
MAX_RESTARTS = 3


@dataclass(frozen=True)
class PgdSolution:
    """Separated coarse solution with its orthonormal stochastic basis."""

    factors: FactoredVector
    kappa: int
    rel_residual: float
    Zc: np.ndarray
    converged: bool
    residual_history: tuple[float, ...]


def _spatial_system(A: StochasticOperator, z: np.ndarray):
    weights = [float(z @ (G @ z)) for G, _ in A.terms]
    mat = sum(w * K for w, (_, K) in zip(weights, A.terms))
    return mat.tocsc(), weights


def _spatial_rhs(A: StochasticOperator, current: FactoredVector, z: np.ndarray) -> np.ndarray:
    rhs = A.rhs.Y @ (A.rhs.Z.T @ z) if A.rhs.rank else np.zeros(A.shape[0])
    if current.rank:
        for G, K in A.terms:
            rhs -= (K @ current.Y) @ (current.Z.T @ (G @ z))
    return rhs


def _stochastic_system(A: StochasticOperator, y: np.ndarray):
    weights = [float(y @ (K @ y)) for _, K in A.terms]
    mat = sum(w * G for w, (G, _) in zip(weights, A.terms))
    return mat.tocsc(), weights


def _stochastic_rhs(A: StochasticOperator, current: FactoredVector, y: np.ndarray) -> np.ndarray:
    rhs = A.rhs.Z @ (A.rhs.Y.T @ y) if A.rhs.rank else np.zeros(A.shape[1])
    if current.rank:
        for G, K in A.terms:
            rhs -= (G @ current.Z) @ (current.Y.T @ (K.T @ y))
    return rhs


def _increment_change(y_new, z_new, y_old, z_old) -> float:
    """Relative Frobenius distance between successive rank-one increments."""
    pair = FactoredVector(
        np.column_stack([y_new, y_old]), np.column_stack([z_new, -z_old])
    )
    denom = np.linalg.norm(y_new) * np.linalg.norm(z_new)
    return norm(pair) / denom if denom > 0 else np.inf


def enrich_rank_one(
    A: StochasticOperator,
    current: FactoredVector,
    rng: np.random.Generator | None = None,
    alt_tol: float = ALTERNATION_TOL,
    max_sweeps: int = MAX_SWEEPS,
) -> tuple[np.ndarray, np.ndarray]:
    """Next rank-one pair by alternating condensed solves.

    The stochastic factor starts at the first coordinate vector (the mean
    mode); restarts fall back to seeded random vectors.  The returned z has
    unit norm, the magnitude rides in y.
    """
    n_x, n_xi = A.shape
    rng = rng or np.random.default_rng()

    for attempt in range(MAX_RESTARTS + 1):
        if attempt == 0:
            z = np.zeros(n_xi)
            z[0] = 1.0
        else:
            z = rng.standard_normal(n_xi)
            z /= np.linalg.norm(z)
        y_prev = None
        z_prev = None
        try:
            for _ in range(max_sweeps):
                mat, weights = _spatial_system(A, z)
                if abs(weights[0]) < 1e-300:
                    raise _DegenerateEnrichment("spatial condensation vanished")
                y = spla.spsolve(mat, _spatial_rhs(A, current, z))
                ynorm = np.linalg.norm(y)
                if not np.isfinite(ynorm) or ynorm == 0.0:
                    raise _DegenerateEnrichment("spatial solve returned a null factor")

                mat, weights = _stochastic_system(A, y)
                if abs(weights[0]) < 1e-300:
                    raise _DegenerateEnrichment("stochastic condensation vanished")
                z = spla.spsolve(mat, _stochastic_rhs(A, current, y))
                znorm = np.linalg.norm(z)
                if not np.isfinite(znorm) or znorm == 0.0:
                    raise _DegenerateEnrichment("stochastic solve returned a null factor")
                y = y * znorm
                z = z / znorm

                if y_prev is not None and _increment_change(y, z, y_prev, z_prev) < alt_tol:
                    break
                y_prev, z_prev = y, z
            return y, z
        except _DegenerateEnrichment:
            continue
    raise RuntimeError(f"enrichment failed after {MAX_RESTARTS} random restarts")


class _DegenerateEnrichment(Exception):
    pass


def update_stochastic(
    A: StochasticOperator,
    Y: np.ndarray,
    rtol: float = 1e-10,
    maxiter: int | None = None,
) -> np.ndarray:
    """Re-solve all stochastic factors for fixed spatial factors Y.

    Solves the coupled system with (i, j) block sum_l (y_i^T K_l y_j) G_l by
    a preconditioned Krylov iteration (conjugate gradients when every K_l is
    symmetric, GMRES otherwise).  The preconditioner inverts the mean block
    Z -> Z H_0^{-T} with H_0 = Y^T K_0 Y.
    """
    n_x, n_xi = A.shape
    kappa = Y.shape[1]
    H = [np.asarray(Y.T @ (K @ Y)) for _, K in A.terms]
    rhs = A.rhs.Z @ (A.rhs.Y.T @ Y) if A.rhs.rank else np.zeros((n_xi, kappa))

    def matvec(zflat):
        Z = np.asarray(zflat, dtype=float).reshape(n_xi, kappa, order="F")
        out = np.zeros((n_xi, kappa))
        for Hl, (G, _) in zip(H, A.terms):
            out += (G @ Z) @ Hl.T
        return out.ravel(order="F")

    inv_H0 = np.linalg.pinv(H[0])

    def precond(zflat):
        Z = np.asarray(zflat, dtype=float).reshape(n_xi, kappa, order="F")
        return (Z @ inv_H0.T).ravel(order="F")

    size = n_xi * kappa
    op = spla.LinearOperator((size, size), matvec=matvec, dtype=float)
    M = spla.LinearOperator((size, size), matvec=precond, dtype=float)
    b = rhs.ravel(order="F")
    maxiter = maxiter or max(200, 20 * kappa)
    solver = spla.cg if A.symmetric else spla.gmres
    kwargs = {"rtol": rtol, "atol": 0.0, "maxiter": maxiter, "M": M}
    if solver is spla.gmres:
        kwargs["restart"] = 50
    zflat, info = solver(op, b, **kwargs)
    if info != 0:
        # redundant factor sets (kappa above the true rank) make the block
        # system singular but consistent; solve those exactly while small
        if size <= 4000:
            dense = np.zeros((size, size))
            for Hl, (G, _) in zip(H, A.terms):
                dense += np.kron(Hl, G.toarray())
            zflat = np.linalg.lstsq(dense, b, rcond=None)[0]
        else:
            raise RuntimeError(
                f"stochastic update did not converge (info={info}, maxiter={maxiter})"
            )
    return zflat.reshape(n_xi, kappa, order="F")


def handle_nonhomogeneous_bc(A: StochasticOperator, lift) -> StochasticOperator:
    """Fold Dirichlet lift contributions into the factored right-hand side.

    ``lift`` is a fem.BoundaryLift.  Term l of the operator contributes the
    rank-one piece (G_l e_1) (x) (-A_l[int, bnd] g_D); columns are appended
    to the stored rhs and the nodal boundary values are recorded for
    reconstruction.
    """
    if lift is None:
        return A
    n_x, n_xi = A.shape
    y_cols, z_cols = [], []
    if A.rhs.rank:
        y_cols.append(A.rhs.Y)
        z_cols.append(A.rhs.Z)
    for (G, _), l in zip(A.terms, A.term_index):
        coup = lift.coupling[l]
        if not np.any(coup):
            continue
        e1 = np.zeros(n_xi)
        e1[0] = 1.0
        z = G @ e1
        if not np.any(z):
            continue
        y_cols.append(coup.reshape(-1, 1))
        z_cols.append(np.asarray(z).reshape(-1, 1))
    if not y_cols:
        rhs = FactoredVector.zero(n_x, n_xi)
    else:
        rhs = truncate_svd(
            FactoredVector(np.hstack(y_cols), np.hstack(z_cols)), tol=1e-15
        )
    return StochasticOperator(
        A.terms, rhs, symmetric=A.symmetric,
        term_index=A.term_index, bc_values=lift.values_full,
    )


def extract_stochastic_basis(u: FactoredVector, rank_tol: float = 1e-12) -> np.ndarray:
    """Orthonormal basis spanning the stochastic factor columns of u.

    Columns are normalized before the SVD so that weakly weighted modes
    survive: a direction the coarse solution carries with a tiny weight can
    still matter on the fine grid, and normalization changes conditioning,
    not span.  Directions below ``rank_tol`` of the leading singular value
    are genuinely dependent and are dropped.
    """
    if u.rank == 0:
        return np.zeros((u.shape[1], 0))
    norms = np.linalg.norm(u.Z, axis=0)
    keep_cols = norms > 0.0
    Zn = u.Z[:, keep_cols] / norms[keep_cols]
    U, s, _ = np.linalg.svd(Zn, full_matrices=False)
    keep = int(np.sum(s > rank_tol * s[0]))
    return U[:, :keep]


def solve_pgd(
    A: StochasticOperator,
    eps: float,
    max_rank: int = 500,
    update_policy: str = "at-end",
    update_every: int = 5,
    residual_every: int = 5,
    seed: int | None = 0,
    alt_tol: float = ALTERNATION_TOL,
    max_sweeps: int = MAX_SWEEPS,
) -> PgdSolution:
    """Enrich until the relative residual drops below eps.

    The residual is evaluated in blocks of ``residual_every`` enrichments
    (and at rank one), so attained ranks land on block boundaries; the
    block granularity buys the stochastic basis a safety margin that the
    fine-grid projection solve relies on.  ``update_policy`` "at-end"
    solves the coupled stochastic update once after convergence (enough
    for symmetric diffusion); "every-k" also updates at checkpoints whose
    rank is a multiple of ``update_every``, which transport-dominated
    problems may need to keep the rank count down.  Updates are kept only
    when they do not worsen the measured residual.
    """
    if update_policy not in ("at-end", "every-k"):
        raise ValueError(f"unknown update policy {update_policy!r}")
    if residual_every < 1:
        raise ValueError("residual_every must be >= 1")
    n_x, n_xi = A.shape
    rng = np.random.default_rng(seed)
    fnorm = norm(A.rhs)
    if fnorm == 0.0:
        return PgdSolution(FactoredVector.zero(n_x, n_xi), 0, 0.0, np.zeros((n_xi, 0)), True, (0.0,))

    u = FactoredVector.zero(n_x, n_xi)
    history = []
    converged = False

    def apply_update(current, current_rel):
        # the update is optimal in the operator-induced norm, which can move
        # the l2 residual slightly; keep whichever factor set measures better
        updated = FactoredVector(current.Y, update_stochastic(A, current.Y))
        rel = residual_norm(A, updated) / fnorm
        if rel <= current_rel:
            return updated, rel
        return current, current_rel

    rel = np.inf
    while u.rank < max_rank and not converged:
        y, z = enrich_rank_one(A, u, rng, alt_tol=alt_tol, max_sweeps=max_sweeps)
        u = add(u, FactoredVector.rank_one(y, z))
        at_checkpoint = u.rank == 1 or u.rank % residual_every == 0
        if not (at_checkpoint or u.rank == max_rank):
            continue
        rel = residual_norm(A, u) / fnorm
        if update_policy == "every-k" and u.rank % update_every == 0:
            u, rel = apply_update(u, rel)
        history.append(rel)
        if rel < eps:
            converged = True

    if not np.isfinite(rel):
        rel = residual_norm(A, u) / fnorm
    u, rel = apply_update(u, rel)
    history.append(rel)
    converged = converged or rel < eps

    if not converged:
        warnings.warn(
            f"PGD stopped at rank {u.rank} with relative residual {rel:.3e} > {eps:.1e}",
            stacklevel=2,
        )
    Zc = extract_stochastic_basis(u)
    return PgdSolution(u, u.rank, rel, Zc, converged, tuple(history))
