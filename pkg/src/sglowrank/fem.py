"""Bilinear Q1 finite elements on structured rectangular grids.

Assembles the spatial matrices of the stochastic Galerkin system: the mean
stiffness matrix, one weighted stiffness matrix per KL mode, and for the
convection-diffusion benchmark the convection matrix, the streamline
diffusion stabilization, and the Dirichlet boundary lift.

Grids are tensor products of 1D node arrays, uniform or vertically
stretched, refinement level l meaning 2^l elements per side.  Node
numbering is lexicographic by (y, x).  Homogeneous Dirichlet conditions are
imposed by restriction to interior nodes; non-homogeneous data is folded
into per-term right-hand-side contributions -A_l[int, bnd] g_D.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.io import mmwrite

from .randfield import KLExpansion, eval_mode, max_theta_and_halfwave

__all__ = [
    "Grid",
    "GridStretch",
    "SpatialMatrices",
    "PecletData",
    "BoundaryLift",
    "make_grid",
    "stretch_for_boundary_layer",
    "assemble_diffusion",
    "assemble_convection_diffusion",
    "recommend_coarse_level",
    "interior_to_full",
    "export_matrix_market",
]

# 2x2 Gauss rule on the reference square [-1, 1]^2, weights all 1
_GP = 1.0 / np.sqrt(3.0)
_GAUSS = np.array([(-_GP, -_GP), (_GP, -_GP), (_GP, _GP), (-_GP, _GP)])
# corner order: (-1,-1), (1,-1), (1,1), (-1,1)
_CORNERS = np.array([(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)])

# shape values and reference gradients at the Gauss points, shape (4 nodes, 4 pts)
_N = np.array(
    [[0.25 * (1 + cx * gx) * (1 + cy * gy) for gx, gy in _GAUSS] for cx, cy in _CORNERS]
)
_DNX = np.array([[0.25 * cx * (1 + cy * gy) for gx, gy in _GAUSS] for cx, cy in _CORNERS])
_DNY = np.array([[0.25 * cy * (1 + cx * gx) for gx, gy in _GAUSS] for cx, cy in _CORNERS])


@dataclass(frozen=True)
class GridStretch:
    """Geometric grading of element heights toward the top wall y = y_hi."""

    ratio: float

    def __post_init__(self):
        if self.ratio <= 1.0:
            raise ValueError(f"stretch ratio must exceed 1, got {self.ratio}")


@dataclass(frozen=True)
class Grid:
    level: int
    domain: tuple[float, float, float, float]
    x_coords: np.ndarray
    y_coords: np.ndarray
    stretch: GridStretch | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.x_coords), len(self.y_coords))

    @property
    def n_nodes(self) -> int:
        return len(self.x_coords) * len(self.y_coords)

    @property
    def n_interior(self) -> int:
        return (len(self.x_coords) - 2) * (len(self.y_coords) - 2)

    def node_coords(self) -> np.ndarray:
        """All node coordinates, shape (n_nodes, 2), y-major ordering."""
        X, Y = np.meshgrid(self.x_coords, self.y_coords, indexing="xy")
        return np.column_stack([X.ravel(), Y.ravel()])

    def interior_mask(self) -> np.ndarray:
        nx, ny = self.shape
        mask = np.zeros((ny, nx), dtype=bool)
        mask[1:-1, 1:-1] = True
        return mask.ravel()

    def interior_indices(self) -> np.ndarray:
        return np.flatnonzero(self.interior_mask())

    def boundary_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.interior_mask())


@dataclass(frozen=True)
class PecletData:
    """Per-element Peclet numbers and streamline-diffusion coefficients."""

    peclet: np.ndarray
    delta: np.ndarray


@dataclass(frozen=True)
class BoundaryLift:
    """Dirichlet data and its per-term contribution to the reduced rhs.

    ``values_full`` holds g_D at boundary nodes (zero at interior nodes);
    ``coupling[l]`` is -A_l[interior, boundary] @ g_D for operator term l.
    """

    values_full: np.ndarray
    coupling: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class SpatialMatrices:
    """Interior-reduced spatial matrices of one Galerkin problem."""

    K: tuple[sp.csr_matrix, ...]  # mean stiffness first, then one per KL mode
    f0: np.ndarray
    grid: Grid
    N: sp.csr_matrix | None = None
    S: sp.csr_matrix | None = None
    bc_lift: BoundaryLift | None = None


def make_grid(level: int, domain: tuple[float, float, float, float], stretch: GridStretch | None = None) -> Grid:
    """Structured grid with 2^level elements per side.

    With ``stretch``, element heights form a geometric progression that
    decreases toward y = y_hi by the given ratio; widths stay uniform.
    """
    if level < 1:
        raise ValueError("level must be >= 1")
    x_lo, x_hi, y_lo, y_hi = domain
    n = 2**level
    x = np.linspace(x_lo, x_hi, n + 1)
    if stretch is None:
        y = np.linspace(y_lo, y_hi, n + 1)
    else:
        r = stretch.ratio
        # wall-adjacent element has the smallest height h_min; heights grow
        # by r moving away from y_hi
        heights = r ** np.arange(n - 1, -1, -1)
        heights *= (y_hi - y_lo) / heights.sum()
        y = np.concatenate([[y_lo], y_lo + np.cumsum(heights)])
        y[-1] = y_hi
    return Grid(level, domain, x, y, stretch)


def stretch_for_boundary_layer(
    level: int, domain: tuple[float, float, float, float], nu: float, ratio_cap: float = 1.5
) -> GridStretch | None:
    """Grading whose wall element height is about nu, ratio capped for quality.

    Returns None when the uniform grid already resolves the layer.
    """
    height = domain[3] - domain[2]
    n = 2**level
    if height / n <= nu:
        return None

    def wall_height(r):
        return height * (r - 1.0) / (r**n - 1.0)

    if wall_height(ratio_cap) >= nu:
        return GridStretch(ratio_cap)
    lo, hi = 1.0 + 1e-12, ratio_cap
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if wall_height(mid) > nu:
            lo = mid
        else:
            hi = mid
    return GridStretch(0.5 * (lo + hi))


def _element_geometry(grid: Grid):
    """Element sizes, Gauss point coordinates, and connectivity."""
    hx = np.diff(grid.x_coords)
    hy = np.diff(grid.y_coords)
    nex, ney = len(hx), len(hy)
    HX = np.tile(hx, ney)
    HY = np.repeat(hy, nex)
    x0 = np.tile(grid.x_coords[:-1], ney)
    y0 = np.repeat(grid.y_coords[:-1], nex)
    # Gauss points mapped to each element, shape (n_e, 4)
    XG = x0[:, None] + 0.5 * HX[:, None] * (1.0 + _GAUSS[:, 0])[None, :]
    YG = y0[:, None] + 0.5 * HY[:, None] * (1.0 + _GAUSS[:, 1])[None, :]
    nx = len(grid.x_coords)
    ex = np.tile(np.arange(nex), ney)
    ey = np.repeat(np.arange(ney), nex)
    n00 = ey * nx + ex
    conn = np.column_stack([n00, n00 + 1, n00 + 1 + nx, n00 + nx])
    return HX, HY, XG, YG, conn


def _scatter(grid: Grid, conn: np.ndarray, Ke: np.ndarray) -> sp.csr_matrix:
    n = grid.n_nodes
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    A = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))
    return A.tocsr()


def _stiffness_full(grid: Grid, coef_at_gauss: np.ndarray) -> sp.csr_matrix:
    """Weighted stiffness on all nodes; coef_at_gauss has shape (n_e, 4)."""
    HX, HY, _, _, conn = _element_geometry(grid)
    gx = np.einsum("eg,ag,bg->eab", coef_at_gauss, _DNX, _DNX) * (HY / HX)[:, None, None]
    gy = np.einsum("eg,ag,bg->eab", coef_at_gauss, _DNY, _DNY) * (HX / HY)[:, None, None]
    return _scatter(grid, conn, gx + gy)


def _convection_full(grid: Grid, wind: tuple[float, float]) -> sp.csr_matrix:
    """[N]_{ab} = integral (w . grad phi_b) phi_a, derivative on the trial index."""
    HX, HY, _, _, conn = _element_geometry(grid)
    wx, wy = wind
    # (w . grad N_b) N_a detJ with detJ = hx hy / 4
    cx = np.einsum("ag,bg->ab", _N, _DNX)
    cy = np.einsum("ag,bg->ab", _N, _DNY)
    Ke = wx * 0.5 * HY[:, None, None] * cx + wy * 0.5 * HX[:, None, None] * cy
    return _scatter(grid, conn, Ke)


def _streamline_full(grid: Grid, wind: tuple[float, float], delta: np.ndarray) -> sp.csr_matrix:
    HX, HY, _, _, conn = _element_geometry(grid)
    wx, wy = wind
    dxa = (2.0 / HX)[:, None, None] * _DNX[None, :, :] * wx
    dya = (2.0 / HY)[:, None, None] * _DNY[None, :, :] * wy
    wgrad = dxa + dya  # (n_e, 4 nodes, 4 pts)
    detj = 0.25 * HX * HY
    Ke = np.einsum("e,eag,ebg->eab", delta * detj, wgrad, wgrad)
    return _scatter(grid, conn, Ke)


def _load_full(grid: Grid, value: float = 1.0) -> np.ndarray:
    HX, HY, _, _, conn = _element_geometry(grid)
    detj = 0.25 * HX * HY
    fe = value * detj[:, None] * _N.sum(axis=1)[None, :]
    f = np.zeros(grid.n_nodes)
    np.add.at(f, conn.ravel(), fe.ravel())
    return f


def _kl_coefficients_at_gauss(grid: Grid, kl: KLExpansion) -> list[np.ndarray]:
    _, _, XG, YG, _ = _element_geometry(grid)
    pts = np.stack([XG, YG], axis=-1)
    return [eval_mode(kl, l, pts) for l in range(kl.num_modes)]


def _coercivity_check(grid: Grid, kl: KLExpansion, coefs: list[np.ndarray]) -> None:
    """Warn when the field can lose positivity at a hypercube corner."""
    if not coefs:
        return
    # worst case over xi in [-sqrt3, sqrt3]^M is a0 - sqrt3 * sum |modes|
    total = np.abs(np.stack(coefs)).sum(axis=0)
    worst = kl.mean_a0 - np.sqrt(3.0) * total.max()
    if worst <= 0:
        warnings.warn(
            f"random field may lose coercivity: min over corners reaches {worst:.3e}",
            stacklevel=3,
        )


def _reduce(grid: Grid, A: sp.csr_matrix) -> sp.csr_matrix:
    idx = grid.interior_indices()
    return A[idx][:, idx].tocsr()


def _coupling(grid: Grid, A: sp.csr_matrix, g_full: np.ndarray) -> np.ndarray:
    idx = grid.interior_indices()
    bnd = grid.boundary_indices()
    return -(A[idx][:, bnd] @ g_full[bnd])


def assemble_diffusion(grid: Grid, kl: KLExpansion) -> SpatialMatrices:
    """Stiffness family K_0..K_M and unit load for the diffusion benchmark.

    K_0 uses the constant mean coefficient, K_l the mode coefficient
    sigma*sqrt(lambda_l)*a_l evaluated at the 2x2 Gauss points; homogeneous
    Dirichlet rows and columns are eliminated.
    """
    coefs = _kl_coefficients_at_gauss(grid, kl)
    _coercivity_check(grid, kl, coefs)
    n_e = (len(grid.x_coords) - 1) * (len(grid.y_coords) - 1)
    mean = np.full((n_e, 4), float(kl.mean_a0))
    K = [_reduce(grid, _stiffness_full(grid, mean))]
    K.extend(_reduce(grid, _stiffness_full(grid, c)) for c in coefs)
    f0 = _load_full(grid)[grid.interior_indices()]
    return SpatialMatrices(tuple(K), f0, grid)


def _dirichlet_values_cd(grid: Grid) -> np.ndarray:
    """Nodal Dirichlet data of the convection-diffusion benchmark.

    g = x on the inflow wall y = y_lo, g = -1 / +1 on the side walls, and
    g = 0 on the whole outflow row y = y_hi including its corners.
    """
    nx, ny = grid.shape
    g = np.zeros((ny, nx))
    g[:, 0] = -1.0
    g[:, -1] = 1.0
    g[0, :] = grid.x_coords
    g[-1, :] = 0.0
    return g.ravel()


def assemble_convection_diffusion(
    grid: Grid,
    kl: KLExpansion,
    nu: float,
    wind: tuple[float, float] = (0.0, 1.0),
) -> tuple[SpatialMatrices, PecletData]:
    """Spatial matrices nu*K_l, N, S and boundary lift for the wind benchmark."""
    if nu <= 0:
        raise ValueError("viscosity must be positive")
    coefs = _kl_coefficients_at_gauss(grid, kl)
    _coercivity_check(grid, kl, coefs)
    HX, HY, _, _, _ = _element_geometry(grid)

    wnorm = float(np.hypot(*wind))
    # element length in the wind direction
    h_k = (abs(wind[0]) * HX + abs(wind[1]) * HY) / wnorm
    peclet = wnorm * h_k / (2.0 * nu)
    delta = np.where(peclet > 1.0, h_k / (2.0 * wnorm) * (1.0 - 1.0 / peclet), 0.0)

    n_e = len(HX)
    mean = np.full((n_e, 4), float(kl.mean_a0))
    K0_full = _stiffness_full(grid, mean) * nu
    Kl_full = [_stiffness_full(grid, c) * nu for c in coefs]
    N_full = _convection_full(grid, wind)
    S_full = _streamline_full(grid, wind, delta)

    g_full = _dirichlet_values_cd(grid)
    mean_full = (K0_full + N_full + S_full).tocsr()
    coupling = [_coupling(grid, mean_full, g_full)]
    coupling.extend(_coupling(grid, A, g_full) for A in Kl_full)
    lift = BoundaryLift(g_full, tuple(coupling))

    K = [_reduce(grid, K0_full)]
    K.extend(_reduce(grid, A) for A in Kl_full)
    spatial = SpatialMatrices(
        tuple(K),
        np.zeros(grid.n_interior),
        grid,
        N=_reduce(grid, N_full),
        S=_reduce(grid, S_full),
        bc_lift=lift,
    )
    return spatial, PecletData(peclet, delta)


def recommend_coarse_level(
    kl: KLExpansion,
    points_per_halfwave: float = 8.0,
    problem_kind: str = "diffusion",
    nu: float | None = None,
    max_level: int = 12,
) -> int:
    """Coarsest dyadic level resolving the retained KL modes.

    The target spacing is half_wavelength / points_per_halfwave; since dyadic
    spacings cannot match it exactly, the coarsest level within a factor two
    of the target is chosen.  For convection-diffusion the level must also
    resolve the outflow layer of width O(nu): the spacing must not exceed the
    geometric mean of the wall-normal extent and nu, which is what a graded
    mesh with wall element about nu supports.
    """
    _, halfwave = max_theta_and_halfwave(kl)
    Lx, Ly = kl.cov.lengths
    side = max(Lx, Ly)
    target = 2.0 * halfwave / points_per_halfwave
    level = 1
    while side / 2**level > target and level < max_level:
        level += 1

    if problem_kind == "convection-diffusion":
        if nu is None:
            raise ValueError("nu is required for convection-diffusion")
        layer_target = np.sqrt(Ly * nu)
        layer_level = 1
        while Ly / 2**layer_level > layer_target and layer_level < max_level:
            layer_level += 1
        level = max(level, layer_level)
    elif problem_kind != "diffusion":
        raise ValueError(f"unknown problem kind {problem_kind!r}")
    return level


def interior_to_full(grid: Grid, interior_values: np.ndarray, boundary_values: np.ndarray | None = None) -> np.ndarray:
    """Embed interior nodal values into the full grid, optionally adding bc data."""
    full = np.zeros(grid.n_nodes) if boundary_values is None else boundary_values.copy()
    full[grid.interior_indices()] += interior_values
    return full


def export_matrix_market(matrix, path) -> None:
    mmwrite(str(path), sp.coo_matrix(matrix))
