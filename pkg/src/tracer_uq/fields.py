"""Matérn fields from the white-noise SPDE and the derived coefficient fields.

A standard Matérn field on the sampling box Ĝ solves

    (I - κ⁻² Δ)^k u = η W,    u = 0 on ∂Ĝ,

discretized with P1 elements and a lumped mass matrix. The white noise W
enters through its integrals over the cells of the grid; the coarse level of
an MLMC pair reuses the sums of the fine integrals, which is what couples the
two levels.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import integrate, special

from .grids import GridLevel, SimplexGrid, restrict_to_inner
from .rng import RandomStream, normal_inv_cdf

SOLVER_RTOL = 1e-8


class FieldError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class MaternParams:
    """Covariance parameters ``(sigma, nu, lam)`` in dimension ``dim``."""

    sigma: float
    nu: float
    lam: float
    dim: int

    def __post_init__(self):
        if self.sigma <= 0 or self.lam <= 0:
            raise FieldError("sigma and lam must be positive")
        if self.dim not in (1, 2, 3):
            raise FieldError("dim must be 1, 2 or 3")
        k2 = self.nu + self.dim / 2
        if self.nu <= 0 or abs(k2 / 2 - round(k2 / 2)) > 1e-12 or round(k2 / 2) < 1:
            raise FieldError(f"nu must equal 2k−d/2 for a positive integer k (got nu={self.nu}, d={self.dim})")

    @property
    def kappa(self) -> float:
        return math.sqrt(8 * self.nu) / self.lam

    @property
    def k(self) -> int:
        return int(round((self.nu + self.dim / 2) / 2))

    @property
    def eta(self) -> float:
        d = self.dim
        return (self.sigma * (4 * math.pi) ** (d / 4) * self.kappa ** (-d / 2)
                * math.sqrt(special.gamma(self.nu + d / 2) / special.gamma(self.nu)))

    def covariance(self, r):
        return matern_covariance(r, self.sigma, self.nu, self.lam)


def matern_covariance(r, sigma: float, nu: float, lam: float):
    """``σ² 2^{1-ν}/Γ(ν) (κr)^ν K_ν(κr)`` with ``κ = √(8ν)/λ``."""
    x = math.sqrt(8 * nu) / lam * np.abs(np.asarray(r, dtype=np.float64))
    with np.errstate(invalid="ignore"):
        val = sigma**2 * 2 ** (1 - nu) / special.gamma(nu) * x**nu * special.kv(nu, x)
    return np.where(x == 0, sigma**2, val)


def bessel_k_quad(nu: float, x: float) -> float:
    """``K_ν(x) = ∫₀^∞ exp(-x cosh t) cosh(νt) dt`` by adaptive quadrature (test oracle)."""
    # truncate where the integrand has fallen below e^-60 of its scale
    hi = 1.0
    while x * math.cosh(hi) - nu * hi < 60 + x:
        hi *= 2
    t_max = hi
    val, _ = integrate.quad(lambda t: math.exp(-x * math.cosh(t)) * math.cosh(nu * t), 0, t_max,
                            epsabs=0, epsrel=1e-12, limit=400)
    return val


# ---------------------------------------------------------------- white noise

@dataclass(eq=False)
class WhiteNoiseRealization:
    """Cell integrals of white noise on the Ĝ grid of ``level``.

    ``values`` has shape ``(n_cells,)`` or ``(batch, n_cells)``.
    """

    level: GridLevel
    values: np.ndarray


def sample_white_noise(level: GridLevel, stream: RandomStream, batch: int | None = None) -> WhiteNoiseRealization:
    n = level.outer.n_cells
    size = n if batch is None else (batch, n)
    z = stream.standard_normal(size)
    return WhiteNoiseRealization(level, z * np.sqrt(level.outer.volumes))


def couple_to_coarse(fine: WhiteNoiseRealization) -> WhiteNoiseRealization:
    """Aggregate fine cell integrals onto the parent cells of the next coarser level."""
    lvl = fine.level
    if lvl.coarser is None:
        raise FieldError("level 1 has no coarser level")
    ch = lvl.children
    vals = fine.values
    # fixed summation order: children in ascending fine index
    out = vals[..., ch[:, 0]].copy()
    for j in range(1, ch.shape[1]):
        out = out + vals[..., ch[:, j]]
    return WhiteNoiseRealization(lvl.coarser, out)


class BisectionTree:
    """Recursive bisection of the Ĝ cells used for QMC dimension ordering.

    Each node is split into two halves by cell count along the axis of
    largest centroid extent. Dimension 0 drives the total noise over Ĝ and
    dimension ``j > 0`` the split of the ``j``-th internal node in
    breadth-first order (a Brownian-bridge style construction). Leaves are
    single cells.
    """

    def __init__(self, grid: SimplexGrid):
        cent = grid.centroids
        vol = grid.volumes
        n = grid.n_cells
        leaf_cell = {}
        # breadth-first queue of (node id, cell index array)
        queue = [(0, np.arange(n))]
        next_id = 1
        internal = []
        head = 0
        while head < len(queue):
            node, cells = queue[head]
            head += 1
            if len(cells) == 1:
                leaf_cell[node] = int(cells[0])
                continue
            pts = cent[cells]
            axis = int(np.argmax(np.ptp(pts, axis=0)))
            order = np.lexsort((cells, pts[:, axis]))
            cells = cells[order]
            half = len(cells) // 2
            lid, rid = next_id, next_id + 1
            next_id += 2
            internal.append((node, lid, rid))
            queue.append((lid, cells[:half]))
            queue.append((rid, cells[half:]))
        self.n_nodes = next_id
        self.n_cells = n
        node_area = np.zeros(self.n_nodes)
        node_depth = np.zeros(self.n_nodes, dtype=np.int64)
        leaves = np.array(sorted(leaf_cell), dtype=np.int64)
        node_area[leaves] = vol[[leaf_cell[k] for k in leaves]]
        for node, lid, rid in reversed(internal):
            node_area[node] = node_area[lid] + node_area[rid]
        for node, lid, rid in internal:
            node_depth[lid] = node_depth[rid] = node_depth[node] + 1
        self.internal = np.array(internal, dtype=np.int64).reshape(-1, 3)
        self.area = node_area
        self.leaf_nodes = leaves
        self.leaf_cells = np.array([leaf_cell[k] for k in leaves], dtype=np.int64)
        depth = node_depth[self.internal[:, 0]]
        self._by_depth = [np.nonzero(depth == lvl)[0] for lvl in range(int(depth.max()) + 1)] if len(depth) else []

    def noise_from_normals(self, z: np.ndarray) -> np.ndarray:
        """Cell integrals from standard normals ``z`` of shape ``(..., n_cells)``."""
        z = np.asarray(z, dtype=np.float64)
        batch = z.shape[:-1]
        tot = np.zeros(batch + (self.n_nodes,))
        tot[..., 0] = math.sqrt(self.area[0]) * z[..., 0]
        for idx in self._by_depth:
            node, lid, rid = self.internal[idx].T
            a, a1, a2 = self.area[node], self.area[lid], self.area[rid]
            s = tot[..., node]
            s1 = (a1 / a) * s + np.sqrt(a1 * a2 / a) * z[..., idx + 1]
            tot[..., lid] = s1
            tot[..., rid] = s - s1
        out = np.empty(batch + (self.n_cells,))
        out[..., self.leaf_cells] = tot[..., self.leaf_nodes]
        return out


def bisection_tree(level: GridLevel) -> BisectionTree:
    key = "bisection_tree"
    if key not in level.cache:
        level.cache[key] = BisectionTree(level.outer)
    return level.cache[key]


ORDERINGS = ("identity", "hierarchical")


def white_noise_from_qmc_point(level: GridLevel, point: np.ndarray,
                               ordering: str = "hierarchical") -> WhiteNoiseRealization:
    """White noise driven by QMC coordinates ``point`` of shape ``(..., s)``, ``s >= n_cells``.

    ``identity`` maps coordinate ``c`` to cell ``c``. ``hierarchical`` feeds
    the coordinates through :class:`BisectionTree`, so low coordinates fix
    large-scale sums of the noise.
    """
    pts = np.asarray(point, dtype=np.float64)
    n = level.outer.n_cells
    if pts.shape[-1] < n:
        raise FieldError(f"QMC point has {pts.shape[-1]} coordinates, need {n}")
    # unshifted Sobol points contain exact zeros; move them half a 53-bit ulp inside
    z = normal_inv_cdf(np.clip(pts[..., :n], 2.0**-54, 1 - 2.0**-54))
    if ordering == "identity":
        vals = z * np.sqrt(level.outer.volumes)
    elif ordering == "hierarchical":
        vals = bisection_tree(level).noise_from_normals(z)
    else:
        raise FieldError(f"unknown ordering {ordering!r}; expected one of {ORDERINGS}")
    return WhiteNoiseRealization(level, vals)


# ---------------------------------------------------------------- SPDE solve

class MaternSampler:
    """Factorized SPDE operator of one level; maps white noise to nodal fields on Ĝ."""

    def __init__(self, level: GridLevel, params: MaternParams):
        if params.dim != level.outer.dim:
            raise FieldError("Matérn dimension does not match the grid")
        g = level.outer
        self.level = level
        self.params = params
        self.free = np.nonzero(~level.outer_boundary)[0]
        mass = g.lumped_mass
        K = g.matrix_from_local(g.unit_stiffness_local)
        A = (sp.diags(mass) + K / params.kappa**2).tocsr()
        self._A = A[self.free][:, self.free].tocsc()
        self._diag = self._A.diagonal()
        self._lu = spla.splu(self._A)
        self._mass_free = mass[self.free]
        d = g.dim
        rows = g.cells.ravel()
        cols = np.repeat(np.arange(g.n_cells), d + 1)
        load = sp.csr_matrix((np.full(len(rows), 1.0 / (d + 1)), (rows, cols)),
                             shape=(g.n_vertices, g.n_cells))
        self._load = load[self.free]

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self._lu.solve(rhs)
        res = (rhs - self._A @ x) / self._diag[:, None]
        ref = np.linalg.norm(rhs / self._diag[:, None], axis=0)
        err = np.linalg.norm(res, axis=0)
        if np.any(err > SOLVER_RTOL * np.maximum(ref, 1e-300)):
            raise SolverError("SPDE solve did not reach the residual tolerance")
        return x

    def sample(self, noise) -> np.ndarray:
        """Nodal field(s) on Ĝ, shape ``(n_vertices,)`` or ``(batch, n_vertices)``."""
        b = noise.values if isinstance(noise, WhiteNoiseRealization) else np.asarray(noise)
        single = b.ndim == 1
        bb = np.atleast_2d(b).T
        u = self._solve(self.params.eta * (self._load @ bb))
        for _ in range(self.params.k - 1):
            u = self._solve(self._mass_free[:, None] * u)
        out = np.zeros((self.level.outer.n_vertices, bb.shape[1]))
        out[self.free] = u
        return out[:, 0] if single else out.T


def matern_sampler(level: GridLevel, params: MaternParams) -> MaternSampler:
    key = ("matern", params)
    if key not in level.cache:
        level.cache[key] = MaternSampler(level, params)
    return level.cache[key]


def solve_matern(wn: WhiteNoiseRealization, params: MaternParams) -> np.ndarray:
    return matern_sampler(wn.level, params).sample(wn)


# ---------------------------------------------------------------- coefficients

def gamma_copula_field(X, shape: float, scale: float):
    """``F⁻¹(Φ(X))`` for the gamma(shape, scale) CDF ``F``, accurate in both tails."""
    x = np.asarray(X, dtype=np.float64)
    lower = special.gammaincinv(shape, special.ndtr(np.minimum(x, 0.0)))
    upper = special.gammainccinv(shape, special.ndtr(-np.maximum(x, 0.0)))
    out = np.where(x <= 0, lower, upper) * scale
    return float(out) if out.ndim == 0 else out


GAMMA_SHAPE_D = 3.0


def diffusion_field(X_inner, d_gad: float):
    """``D* = 0.25 D_Gad + F⁻¹(Φ(X))`` with shape 3 and scale ``0.75 D_Gad / 3``."""
    return 0.25 * d_gad + gamma_copula_field(X_inner, GAMMA_SHAPE_D, 0.75 * d_gad / GAMMA_SHAPE_D)


def cell_gradients(grid: SimplexGrid, nodal: np.ndarray) -> np.ndarray:
    """Exact gradients of P1 fields, ``(..., n_cells, d)``."""
    _, grads = grid.geometry
    vals = np.asarray(nodal)[..., grid.cells]
    return np.einsum("...ci,cid->...cd", vals, grads)


def curl_p1(grid: SimplexGrid, fields) -> np.ndarray:
    """Cellwise curl of P1 fields: ``[X, Y, Z]`` in 3-D or the rotated gradient of ``ψ`` in 2-D."""
    if grid.dim == 3:
        gx, gy, gz = (cell_gradients(grid, f) for f in fields)
        return np.stack([gz[..., 1] - gy[..., 2], gx[..., 2] - gz[..., 0], gy[..., 0] - gx[..., 1]], axis=-1)
    if grid.dim == 2:
        (psi,) = fields
        g = cell_gradients(grid, psi)
        return np.stack([g[..., 1], -g[..., 0]], axis=-1)
    raise FieldError("curl needs dimension 2 or 3")


def weak_divergence_residual(grid: SimplexGrid, v: np.ndarray, interior: np.ndarray) -> float:
    """``max_j |Σ_c ∫ v·∇φ_j| / Σ_c ∫ |v||∇φ_j|`` over interior vertices ``j``."""
    vol, grads = grid.geometry
    terms = vol[:, None] * np.einsum("cid,cd->ci", grads, v)
    absterms = vol[:, None] * np.linalg.norm(v, axis=1)[:, None] * np.linalg.norm(grads, axis=2)
    num = np.bincount(grid.cells.ravel(), weights=terms.ravel(), minlength=grid.n_vertices)
    den = np.bincount(grid.cells.ravel(), weights=absterms.ravel(), minlength=grid.n_vertices)
    num, den = num[interior], den[interior]
    ok = den > 0
    return float(np.max(np.abs(num[ok]) / den[ok])) if ok.any() else 0.0


@dataclass(frozen=True)
class DirectionalFlow:
    """Deterministic drift ``v_dir`` evaluated in box coordinates mapped to the reference frame.

    A box point ``x`` maps to ``ξ = (x - center) / length_scale`` and the
    reference-frame formula is applied to ``ξ``. In 2-D the first and last
    rows of the 3-D formula are kept with ``ρ = |ξ_1|``.
    """

    v_f: float
    center: tuple
    length_scale: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        xi = (np.atleast_2d(x) - np.asarray(self.center)) / self.length_scale
        d = xi.shape[1]
        v = np.empty_like(xi)
        for a in range(d - 1):
            v[:, a] = np.arctan(15 * xi[:, a]) * (np.abs(xi[:, a]) - 0.1)
        v[:, -1] = -0.9 * xi[:, -1] + 0.06 - np.linalg.norm(xi[:, :-1], axis=1)
        return -self.v_f * v


def velocity_model1(grid: SimplexGrid, fields_inner, U: float, lam: float, v_avg: float,
                    v_dir: np.ndarray | None = None) -> np.ndarray:
    """``v = v_avg η̄(λ) √U curl[X, Y, Z] + v_dir`` on cells, ``η̄ = λ/√8``."""
    vbase = v_avg * lam / math.sqrt(8) * math.sqrt(U) * curl_p1(grid, fields_inner)
    return vbase if v_dir is None else vbase + v_dir


def model1_rms_ratio(nu: float, dim: int) -> float:
    """Analytic ``E[|v_base|²]^{1/2} / v_avg`` for the η̄ = λ/√8 scaling.

    Each partial derivative of a unit Matérn field has variance
    ``κ²/(2(ν-1))``. The curl has 6 such terms in 3-D (2 in 2-D), and
    ``E[U] = 1/2``, so the squared ratio is ``3ν/(2(ν-1))`` in 3-D and
    ``ν/(2(ν-1))`` in 2-D.
    """
    kappa2_lam2 = 8 * nu
    per_axis = kappa2_lam2 / (2 * (nu - 1)) / 8
    n_terms = 2 * 3 if dim == 3 else 2
    return math.sqrt(0.5 * per_axis * n_terms)


def model2_profile(rho: np.ndarray, R: float) -> np.ndarray:
    """``exp(-3(R-ρ)²/(R²-(R-ρ)²))``, continuous to 0 at ρ → 0 and ρ → 2R, zero beyond."""
    rho = np.asarray(rho, dtype=np.float64)
    den = rho * (2 * R - rho)
    inside = den > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.exp(-3 * (R - rho) ** 2 / np.where(inside, den, 1.0))
    return np.where(inside, val, 0.0)


@dataclass(frozen=True)
class RadialInflow:
    """Inward flow ``v̄ p(ρ) (x_c - x)`` with ``v̄ ~ gamma(shape, scale)``.

    ``scale`` is chosen so that the spatial mean over G of ``E[|v|²]``
    equals ``v_avg²``; the spatial mean is a tensor Gauss quadrature over G,
    independent of the grid level.
    """

    center: tuple
    R: float
    v_avg: float
    extents: tuple
    shape: float = 2.0
    quad_points: int = 96

    @functools.cached_property
    def mean_square_profile(self) -> float:
        xg, wg = np.polynomial.legendre.leggauss(self.quad_points)
        d = len(self.extents)
        axes = [0.5 * e * (xg + 1) for e in self.extents]
        weights = [0.5 * e * wg for e in self.extents]
        mesh = np.meshgrid(*axes, indexing="ij")
        w = np.ones_like(mesh[0])
        for a in range(d):
            w = w * np.reshape(weights[a], [-1 if b == a else 1 for b in range(d)])
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        rho = np.linalg.norm(pts - np.asarray(self.center), axis=1)
        f = (model2_profile(rho, self.R) * rho) ** 2
        return float(np.sum(w.ravel() * f) / math.prod(self.extents))

    @functools.cached_property
    def scale(self) -> float:
        # E[v̄²] = shape (shape + 1) scale²
        return self.v_avg / math.sqrt(self.shape * (self.shape + 1) * self.mean_square_profile)

    def field(self, x: np.ndarray, vbar: float) -> np.ndarray:
        diff = np.asarray(self.center) - np.atleast_2d(x)
        rho = np.linalg.norm(diff, axis=1)
        return vbar * model2_profile(rho, self.R)[:, None] * diff

    def vbar_from_uniform(self, u):
        return gamma_copula_field(normal_inv_cdf(u), self.shape, self.scale)


def velocity_model2(grid: SimplexGrid, flow: RadialInflow, vbar: float) -> np.ndarray:
    return flow.field(grid.centroids, vbar)


@dataclass(eq=False)
class CoefficientSample:
    diffusion: np.ndarray      # nodal on G
    velocity: np.ndarray       # cellwise on G
    reaction: float
    model: int


def write_field_csv(path, grid: SimplexGrid, values: np.ndarray) -> None:
    """Snapshot as ``vertex, x[, y[, z]], value`` rows."""
    cols = ["x", "y", "z"][: grid.dim]
    header = ",".join(["vertex", *cols, "value"])
    data = np.column_stack([np.arange(grid.n_vertices), grid.vertices, values])
    fmt = ["%d"] + ["%.10g"] * (grid.dim + 1)
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt=fmt)


def probe_indices(grid: SimplexGrid, points: np.ndarray) -> np.ndarray:
    """Vertex ids nearest to ``points``."""
    pts = np.atleast_2d(points)
    idx = np.rint((pts - grid.lower) / grid.spacing).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(grid.shape))
    return np.ravel_multi_index(idx.T, grid.vshape)
