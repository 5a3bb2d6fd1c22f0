"""Crank–Nicolson transport solve for one coefficient realization.

The tracer enters through the Dirichlet faces with the moving-front profile
``g = c_CSF(t) h(t, x)``. ``c_CSF`` follows from tracer conservation
between G and the CSF compartment, evaluated on a deterministic reference
solution ``c̄`` computed once with the mean coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import CoefficientSample
from .grids import AssembledOperators, GridLevel, assemble

MINUTE = 60.0
QOI_NAMES = ("Qg", "Qw", "qg", "qw")
SOLVER_TOL = 1e-8


class TransportError(RuntimeError):
    pass


@dataclass(frozen=True)
class TransportConfig:
    """Physical and discretization constants of the transport model (SI units).

    ``front_origin`` is the coordinate along the last axis taken as the origin
    of the front position ``x_3`` in ``h``.
    """

    n0: float = 0.5e-3
    v_csf: float = 140e-6
    front_speed: float = 1.5e-5
    front_steepness: float = 20.0
    front_offset: float = -0.2
    front_origin: float = 0.0
    reaction: float = 0.0
    T: float = 86400.0
    dt1: float = 7.5 * MINUTE
    qoi_interval: float = 30 * MINUTE
    dt_reference: float = 30 * 2.0**-6 * MINUTE
    solver: str = "direct"

    def __post_init__(self):
        if self.n0 <= 0 or self.v_csf <= 0 or self.T <= 0:
            raise ValueError("n0, v_csf and T must be positive")
        if self.reaction < 0:
            raise ValueError("reaction must be non-negative")
        if self.solver not in ("direct", "iterative"):
            raise ValueError("solver must be 'direct' or 'iterative'")
        ratio = self.qoi_interval / self.dt1
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("dt1 must divide the QoI interval")
        n_qoi = self.T / self.qoi_interval
        if abs(n_qoi - round(n_qoi)) > 1e-9:
            raise ValueError("the QoI interval must divide T")

    @classmethod
    def fullsize(cls, reaction: float = 0.0) -> "TransportConfig":
        return cls(reaction=reaction)

    @classmethod
    def desk(cls, extents, reaction: float = 0.0, **overrides) -> "TransportConfig":
        """Front constants rescaled to a box whose last extent plays the 0.17 m brain height.

        Lengths and the front speed scale by ``s = H / 0.17`` so the front
        crosses the box on the same time scale as in the full-size model.
        ``V_CSF`` equals the measure of G and ``n0`` keeps ``c_CSF(0) = 3.57``.
        """
        H = float(extents[-1])
        s = H / 0.17
        vol = math.prod(extents)
        c0 = 0.5e-3 / 140e-6
        kw = dict(n0=c0 * vol, v_csf=vol, front_speed=1.5e-5 * s, front_steepness=20.0 / s,
                  front_offset=-0.2 * s, front_origin=0.5 * H, reaction=reaction)
        kw.update(overrides)
        return cls(**kw)

    def dt(self, level: int) -> float:
        return self.dt1 * 2.0 ** -(level - 1)

    def n_steps(self, level: int) -> int:
        return int(round(self.T / self.dt(level)))

    @property
    def qoi_times(self) -> np.ndarray:
        n = int(round(self.T / self.qoi_interval))
        return self.qoi_interval * np.arange(1, n + 1)

    @property
    def n_qoi(self) -> int:
        return 4 * len(self.qoi_times)


def boundary_profile(t, x_last, config: TransportConfig):
    """Front shape ``h = 0.5 + arctan(-a (x_3 - z0 - υ t)) / π``, values in (0, 1)."""
    z = np.asarray(x_last) - config.front_origin
    return 0.5 + np.arctan(-config.front_steepness * (z - config.front_offset
                                                      - config.front_speed * np.asarray(t))) / math.pi


class CrankNicolson:
    """Factorized CN stepper ``(M + Δt/2 A) cⁿ = (M - Δt/2 A) cⁿ⁻¹`` with Dirichlet rows.

    Dirichlet nodes are eliminated: only free nodes are solved for, and the
    boundary values enter the right-hand side.
    """

    CHUNK = 64

    def __init__(self, ops: AssembledOperators, dt: float, solver: str = "direct"):
        A = ops.system
        M = sp.diags(ops.mass)
        n = len(ops.mass)
        self.dt = dt
        self.n = n
        self.dirichlet = np.asarray(ops.dirichlet, dtype=np.int64)
        fixed = np.zeros(n, dtype=bool)
        fixed[self.dirichlet] = True
        self.free = np.nonzero(~fixed)[0]
        lhs = (M + 0.5 * dt * A).tocsr()
        rhs = (M - 0.5 * dt * A).tocsr()
        lhs_f, rhs_f = lhs[self.free], rhs[self.free]
        self.lhs_ff = lhs_f[:, self.free].tocsc()
        self._lhs_ff_csr = self.lhs_ff.tocsr()
        self.lhs_fd = lhs_f[:, self.dirichlet].tocsr()
        self.rhs_ff = rhs_f[:, self.free].tocsr()
        self.rhs_fd = rhs_f[:, self.dirichlet].tocsr()
        self._diag = self.lhs_ff.diagonal()
        self.solver = solver
        if solver == "direct":
            self._lu = spla.splu(self.lhs_ff, permc_spec="MMD_AT_PLUS_A")
        else:
            self._ilu = spla.spilu(self.lhs_ff, drop_tol=1e-5, fill_factor=10)
            self._prec = spla.LinearOperator(self.lhs_ff.shape, self._ilu.solve)

    def _solve_one(self, b: np.ndarray, x0: np.ndarray) -> np.ndarray:
        if self.solver == "direct":
            return self._lu.solve(b)
        x, info = spla.gmres(self.lhs_ff, b, x0=x0, M=self._prec, rtol=1e-13, atol=0.0,
                             restart=50, maxiter=100)
        if info < 0:
            raise TransportError("GMRES breakdown")
        return x

    def check_residual(self, X: np.ndarray, B: np.ndarray) -> None:
        """Jacobi-preconditioned residual of the columns of ``X`` against ``B``."""
        res = np.abs((B - self._lhs_ff_csr @ X) / self._diag[:, None]).max(axis=0)
        scale = np.maximum(1.0, np.abs(B / self._diag[:, None]).max(axis=0))
        if np.any(res > SOLVER_TOL * scale):
            raise TransportError(f"linear solve residual {res.max():.3e} above tolerance")

    def advance(self, c: np.ndarray, g_old: np.ndarray | None, g_new: np.ndarray) -> np.ndarray:
        """One step from the full nodal vector ``c``; ``g_old`` defaults to ``c`` on ∂G_S."""
        if g_old is None:
            g_old = c[self.dirichlet]
        b = self.rhs_ff @ c[self.free]
        if len(self.dirichlet):
            b += self.rhs_fd @ g_old - self.lhs_fd @ g_new
        x = self._solve_one(b, c[self.free])
        self.check_residual(x[:, None], b[:, None])
        out = np.empty(self.n)
        out[self.free] = x
        out[self.dirichlet] = g_new
        return out

    def run(self, boundary: np.ndarray, record: np.ndarray, weights: np.ndarray,
            c0: np.ndarray | None = None, track_min: bool = False):
        """March ``len(boundary) - 1`` steps from ``c0`` (zero by default).

        ``boundary[n]`` holds the Dirichlet values at step ``n``. Returns
        ``weights @ c`` at the steps in ``record`` and the minimum nodal
        value seen when ``track_min`` is set.
        """
        n_steps = len(boundary) - 1
        nf = len(self.free)
        x = np.zeros(nf) if c0 is None else np.asarray(c0, dtype=np.float64)[self.free]
        wf = weights[:, self.free]
        wd = weights[:, self.dirichlet]
        rec = {int(k): i for i, k in enumerate(record)}
        out = np.empty((len(record), weights.shape[0]))
        # Dirichlet data at step 0 are the initial values on ∂G_S
        if c0 is not None and len(self.dirichlet):
            boundary = boundary.copy()
            boundary[0] = np.asarray(c0)[self.dirichlet]
        cmin = 0.0 if c0 is None else float(np.min(c0))
        for start in range(1, n_steps + 1, self.CHUNK):
            stop = min(start + self.CHUNK, n_steps + 1)
            if len(self.dirichlet):
                gnew = boundary[start:stop].T
                gold = boundary[start - 1:stop - 1].T
                lift = np.asarray(self.rhs_fd @ gold - self.lhs_fd @ gnew)
            else:
                lift = np.zeros((nf, stop - start))
            lift = np.ascontiguousarray(lift.T)
            X = np.empty((stop - start, nf))
            B = np.empty_like(X)
            matvec = self.rhs_ff.dot
            for j, n in enumerate(range(start, stop)):
                b = matvec(x)
                b += lift[j]
                x = self._solve_one(b, x)
                X[j] = x
                B[j] = b
                i = rec.get(n)
                if i is not None:
                    out[i] = wf @ x + wd @ boundary[n]
            self.check_residual(X.T, B.T)
            if track_min:
                cmin = min(cmin, float(X.min()))
                if len(self.dirichlet):
                    cmin = min(cmin, float(boundary[start:stop].min()))
        return out, cmin


def advance(state: np.ndarray, ops: AssembledOperators, dt: float, boundary_values: np.ndarray,
            stepper: CrankNicolson | None = None, previous_boundary: np.ndarray | None = None) -> np.ndarray:
    """One Crank–Nicolson step; ``boundary_values`` are imposed on the Dirichlet nodes."""
    stepper = stepper or CrankNicolson(ops, dt)
    return stepper.advance(np.asarray(state, dtype=np.float64), previous_boundary, np.asarray(boundary_values))


@dataclass
class ReferenceSolution:
    """Mean-coefficient solution on a fine grid with its explicit ``c_CSF`` table.

    ``integral[i]`` is ``∫_G c̄`` at ``t = i dt``.
    """

    dt: float
    integral: np.ndarray
    csf: np.ndarray
    reaction: float
    config: TransportConfig
    level: int

    def integral_at(self, t) -> np.ndarray:
        ratio = np.asarray(t) / self.dt
        return np.interp(ratio, np.arange(len(self.integral)), self.integral)


def precompute_reference(level: GridLevel, config: TransportConfig, mean: CoefficientSample,
                         boundary_factor: float = 1.0) -> ReferenceSolution:
    """Explicit-``c_CSF`` Crank–Nicolson run with step ``config.dt_reference``.

    ``c_CSF`` at step ``n`` uses the integrals up to ``n-1``, which keeps the
    boundary condition local in time. ``boundary_factor=0`` seals the
    Dirichlet faces (``g ≡ 0``) for testing.
    """
    dt = config.dt_reference
    n_steps = int(round(config.T / dt))
    ops = assemble(level.inner, mean.diffusion, mean.velocity, mean.reaction, level.dirichlet)
    stepper = CrankNicolson(ops, dt, config.solver)
    w = level.inner.lumped_mass
    zb = level.inner.vertices[stepper.dirichlet, -1]
    r = mean.reaction
    c = np.zeros(level.inner.n_vertices)
    integral = np.zeros(n_steps + 1)
    csf = np.zeros(n_steps + 1)
    csf[0] = config.n0 / config.v_csf
    sink_sum = 0.0  # Σ_{i=1}^{n-2} r ∫ c̄^i
    for n in range(1, n_steps + 1):
        last = integral[n - 1]
        tail = 0.0 if n == 1 else r * last
        csf[n] = (config.n0 - last - 0.5 * dt * (2 * sink_sum + tail)) / config.v_csf
        if n >= 2:
            sink_sum += r * integral[n - 1]
        g = boundary_factor * csf[n] * boundary_profile(n * dt, zb, config)
        c = stepper.advance(c, None, g)
        integral[n] = w @ c
    return ReferenceSolution(dt, integral, csf, r, config, level.level)


def csf_concentration(n: int, dt: float, reference: ReferenceSolution) -> float:
    """Trapezoid-rule ``c_CSF`` at ``t = n dt`` from the stored integrals of ``c̄``."""
    cfg = reference.config
    if n == 0:
        return cfg.n0 / cfg.v_csf
    ints = reference.integral_at(dt * np.arange(1, n + 1))
    r = reference.reaction
    sink = 0.5 * dt * (2 * r * np.sum(ints[:-1]) + r * ints[-1])
    return (cfg.n0 - ints[-1] - sink) / cfg.v_csf


def csf_table(n_steps: int, dt: float, reference: ReferenceSolution) -> np.ndarray:
    """``c_CSF^n`` for ``n = 0..n_steps`` (vectorized form of :func:`csf_concentration`)."""
    cfg = reference.config
    ints = reference.integral_at(dt * np.arange(n_steps + 1))
    r = reference.reaction
    out = np.empty(n_steps + 1)
    out[0] = cfg.n0 / cfg.v_csf
    cums = np.concatenate([[0.0], np.cumsum(ints[1:])])
    n = np.arange(1, n_steps + 1)
    sink = 0.5 * dt * (2 * r * cums[n - 1] + r * ints[n])
    out[1:] = (cfg.n0 - ints[1:] - sink) / cfg.v_csf
    return out


@dataclass(eq=False)
class LevelTransport:
    """Per-level data shared by all realizations: boundary table and QoI weights."""

    level: GridLevel
    config: TransportConfig
    reference: ReferenceSolution
    boundary: np.ndarray = field(init=False)     # (n_steps + 1, n_dirichlet)
    weights: np.ndarray = field(init=False)      # (4, n_vertices)
    record: np.ndarray = field(init=False)       # step indices of the QoI times

    def __post_init__(self):
        lvl, cfg = self.level, self.config
        dt = cfg.dt(lvl.level)
        n_steps = cfg.n_steps(lvl.level)
        dnodes = np.nonzero(lvl.dirichlet)[0]
        csf = csf_table(n_steps, dt, self.reference)
        t = dt * np.arange(n_steps + 1)
        self.boundary = csf[:, None] * boundary_profile(t[:, None], lvl.inner.vertices[dnodes, -1][None, :], cfg)
        rw = lvl.region_weights
        vg = lvl.inner.volumes[lvl.masks["gray_roi"]].sum()
        vw = lvl.inner.volumes[lvl.masks["white_roi"]].sum()
        self.weights = np.stack([rw["gray"], rw["white"], rw["gray_roi"] / vg, rw["white_roi"] / vw])
        self.record = np.rint(cfg.qoi_times / dt).astype(np.int64)
        self.dt = dt
        self.n_steps = n_steps

    def solve(self, coeff: CoefficientSample, return_min: bool = False):
        """QoIs ordered ``[Qg(τ_1..τ_K), Qw(..), qg(..), qw(..)]``."""
        lvl = self.level
        ops = assemble(lvl.inner, coeff.diffusion, coeff.velocity, coeff.reaction, lvl.dirichlet)
        stepper = CrankNicolson(ops, self.dt, self.config.solver)
        out, cmin = stepper.run(self.boundary, self.record, self.weights, track_min=return_min)
        q = out.T.ravel()
        return (q, cmin) if return_min else q


def solve_realization(coeff: CoefficientSample, level: GridLevel, config: TransportConfig,
                      reference: ReferenceSolution) -> np.ndarray:
    return LevelTransport(level, config, reference).solve(coeff)


def qoi_table(q: np.ndarray, config: TransportConfig) -> np.ndarray:
    """Reshape a QoI vector into rows ``(time_min, Qg, Qw, qg, qw)``."""
    t = config.qoi_times / MINUTE
    return np.column_stack([t, np.asarray(q).reshape(4, -1).T])


def write_qoi_csv(path, q: np.ndarray, config: TransportConfig) -> None:
    np.savetxt(path, qoi_table(q, config), delimiter=",", header="time_min,Qg,Qw,qg,qw",
               comments="", fmt="%.10g")


def peclet_diagnostic(level: GridLevel, velocity: np.ndarray, diffusion) -> float:
    """Worst-case cell Péclet number ``h |v| / (2 D)`` over the cells of G."""
    D = np.broadcast_to(np.asarray(diffusion, dtype=np.float64), (level.inner.n_vertices,))
    dmin = D[level.inner.cells].min(axis=1)
    vmag = np.linalg.norm(np.asarray(velocity), axis=1)
    return float(np.max(level.h * vmag / (2 * dmin)))
