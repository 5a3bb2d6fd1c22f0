"""Sample models consumed by the estimators.

A model maps ``(level, sample index)`` to coupled QoI vectors
``(Q_ℓ, Q_{ℓ-1})`` and a QMC point to ``Q_ℓ``. :class:`TracerModel` is the
transport model with random coefficients; :class:`TelescopingToy` and
:class:`FunctionModel` are synthetic models with known answers.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import fields as fl
from .grids import BoxDomain, build_hierarchy, restrict_to_inner
from .rng import METHOD_MLMC, RandomStream
from .transport import LevelTransport, TransportConfig, precompute_reference

UNIFORM_EPS = 2.0**-54


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to rebuild a :class:`TracerModel` (picklable)."""

    model: int
    domain: BoxDomain
    base_cells: int
    max_level: int
    transport: TransportConfig
    diffusion: fl.MaternParams
    velocity: fl.MaternParams | None = None
    d_gad: float = 1.2e-10
    v_avg: float = 0.17e-6
    v_f: float = 2e-6
    dir_length_scale: float = 1.0
    R: float = 0.08
    drainage: float = 1e-5
    reference_level: int | None = None
    ordering: str = "hierarchical"
    max_vertices: int = 4_000_000

    def __post_init__(self):
        if self.model not in (1, 2):
            raise ValueError("model must be 1 or 2")
        if self.model == 1 and self.velocity is None:
            raise ValueError("model 1 needs velocity Matérn parameters")
        d = self.domain.dim
        for p in (self.diffusion, self.velocity):
            if p is not None and p.dim != d:
                raise ValueError("Matérn dimension must match the domain")
            if p is not None and self.domain.padding < p.lam - 1e-12:
                raise ValueError("padding must be at least one correlation length")
        if self.ordering not in fl.ORDERINGS:
            raise ValueError(f"ordering must be one of {fl.ORDERINGS}")

    @property
    def n_fields(self) -> int:
        if self.model == 2:
            return 1
        return 1 + (3 if self.domain.dim == 3 else 1)


class TracerModel:
    """Transport QoIs for random diffusion and velocity fields.

    Field ``0`` is the diffusion field; Model 1 adds the stream function (2-D)
    or the three curl potentials (3-D). One scalar per sample drives ``U``
    (Model 1) or ``v̄`` (Model 2). All levels share the same hierarchy, so
    level-ℓ noise aggregates exactly to level ℓ-1.
    """

    n_scalars = 1

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.levels = build_hierarchy(spec.domain, spec.base_cells, spec.max_level, spec.max_vertices)
        self.max_level = spec.max_level
        dom = spec.domain
        self.center = tuple(dom.center)
        self.vdir = fl.DirectionalFlow(spec.v_f, self.center, spec.dir_length_scale)
        self.flow = fl.RadialInflow(self.center, spec.R, spec.v_avg, dom.extents)
        self.n_fields = spec.n_fields
        self.n_qoi = spec.transport.n_qoi
        self._reference = None
        self._transport = {}

    def __getstate__(self):
        return {"spec": self.spec, "reference": self._reference}

    def __setstate__(self, state):
        self.__init__(state["spec"])
        self._reference = state.get("reference")

    @property
    def reaction(self) -> float:
        return 0.0 if self.spec.model == 1 else self.spec.drainage

    def level(self, ell: int):
        if not 1 <= ell <= self.max_level:
            raise ValueError(f"level {ell} outside 1..{self.max_level}")
        return self.levels[ell - 1]

    # coefficients ---------------------------------------------------------

    def mean_coefficients(self, ell: int) -> fl.CoefficientSample:
        lvl = self.level(ell)
        g = lvl.inner
        D = np.full(g.n_vertices, self.spec.d_gad)
        if self.spec.model == 1:
            v = self.vdir(g.centroids)
        else:
            v = self.flow.field(g.centroids, self.flow.shape * self.flow.scale)
        return fl.CoefficientSample(D, v, self.reaction, self.spec.model)

    def coefficients(self, ell: int, fields_outer, scalar_u: float) -> fl.CoefficientSample:
        """Coefficients from standard Matérn fields on Ĝ and the scalar uniform."""
        lvl = self.level(ell)
        g = lvl.inner
        inner = [restrict_to_inner(f, lvl) for f in fields_outer]
        D = fl.diffusion_field(inner[0], self.spec.d_gad)
        if self.spec.model == 1:
            v = fl.velocity_model1(g, inner[1:], scalar_u, self.spec.velocity.lam, self.spec.v_avg,
                                   self.vdir(g.centroids))
        else:
            v = fl.velocity_model2(g, self.flow, float(self.flow.vbar_from_uniform(scalar_u)))
        return fl.CoefficientSample(D, v, self.reaction, self.spec.model)

    def _params(self, f: int) -> fl.MaternParams:
        return self.spec.diffusion if f == 0 else self.spec.velocity

    def fields_from_noise(self, noises) -> list:
        return [fl.solve_matern(wn, self._params(f)) for f, wn in enumerate(noises)]

    # transport ------------------------------------------------------------

    @property
    def reference(self):
        if self._reference is None:
            ref_level = self.spec.reference_level or self.max_level
            mean = self.mean_coefficients(ref_level)
            self._reference = precompute_reference(self.level(ref_level), self.spec.transport, mean)
        return self._reference

    def transport(self, ell: int) -> LevelTransport:
        if ell not in self._transport:
            self._transport[ell] = LevelTransport(self.level(ell), self.spec.transport, self.reference)
        return self._transport[ell]

    def qoi(self, ell: int, noises, scalar_u: float) -> np.ndarray:
        coeff = self.coefficients(ell, self.fields_from_noise(noises), scalar_u)
        return self.transport(ell).solve(coeff)

    # sampling interface used by the estimators ------------------------------

    def streams(self, seed: int, method: int, ell: int, index: int):
        base = RandomStream(seed, (method, ell, index))
        return [base.child(f) for f in range(self.n_fields)], base.child(self.n_fields)

    def sample_pair(self, ell: int, index: int, seed: int, method: int = METHOD_MLMC):
        """Coupled ``(Q_ℓ, Q_{ℓ-1})``; the second entry is ``None`` on level 1 or for MC."""
        fstreams, sstream = self.streams(seed, method, ell, index)
        lvl = self.level(ell)
        noises = [fl.sample_white_noise(lvl, s) for s in fstreams]
        u = sstream.uniform()
        qf = self.qoi(ell, noises, u)
        if ell == 1 or method != METHOD_MLMC:
            return qf, None
        coarse = [fl.couple_to_coarse(wn) for wn in noises]
        return qf, self.qoi(ell - 1, coarse, u)

    def qmc_dimension(self, ell: int) -> int:
        return self.n_scalars + self.n_fields * self.level(ell).outer.n_cells

    def field_coordinates(self, point: np.ndarray, ell: int, f: int) -> np.ndarray:
        n = self.level(ell).outer.n_cells
        return point[..., self.n_scalars + f: self.n_scalars + self.n_fields * n: self.n_fields]

    def evaluate_qmc(self, ell: int, point: np.ndarray) -> np.ndarray:
        lvl = self.level(ell)
        noises = [fl.white_noise_from_qmc_point(lvl, self.field_coordinates(point, ell, f), self.spec.ordering)
                  for f in range(self.n_fields)]
        u = float(np.clip(point[0], UNIFORM_EPS, 1 - UNIFORM_EPS))
        return self.qoi(ell, noises, u)

    def work(self, ell: int) -> float:
        """Deterministic work units of one level-ℓ solve: transport steps x vertices plus SPDE solves."""
        lvl = self.level(ell)
        steps = self.spec.transport.n_steps(ell)
        spde = sum(self._params(f).k for f in range(self.n_fields)) * lvl.outer.n_vertices
        return float(steps * lvl.inner.n_vertices + spde)


@dataclass(frozen=True)
class TelescopingToy:
    """``Q_ℓ = q* + c 2^{-αℓ}(1 + s Z₁) + s₀ Z₀`` with standard normal ``Z₀, Z₁``.

    ``Z₀`` is shared by all levels of a sample and cancels in corrections,
    so ``V_ℓ`` decays like ``2^{-2αℓ}``; work is ``2^{γℓ}``.
    """

    q_star: tuple = (1.0, -0.5, 2.0)
    c: float = 1.0
    alpha: float = 2.0
    noise: float = 1.0
    base_noise: float = 0.1
    gamma: float = 2.0
    max_level: int = 12
    n_scalars: int = 0

    @property
    def n_qoi(self) -> int:
        return len(self.q_star)

    def value(self, ell: int, z0, z1) -> np.ndarray:
        q = np.asarray(self.q_star)
        w = np.linspace(1.0, 0.5, len(q))
        return q + w * self.c * 2.0 ** (-self.alpha * ell) * (1 + self.noise * z1) + self.base_noise * z0

    def sample_pair(self, ell, index, seed, method=METHOD_MLMC):
        z0, z1 = RandomStream(seed, (method, ell, index)).standard_normal(2)
        qf = self.value(ell, z0, z1)
        if ell == 1 or method != METHOD_MLMC:
            return qf, None
        return qf, self.value(ell - 1, z0, z1)

    def truth(self) -> np.ndarray:
        return np.asarray(self.q_star, dtype=np.float64)

    def work(self, ell: int) -> float:
        return 2.0 ** (self.gamma * ell)

    def qmc_dimension(self, ell: int) -> int:
        return 2

    def evaluate_qmc(self, ell, point):
        z = fl.normal_inv_cdf(np.clip(point[:2], UNIFORM_EPS, 1 - UNIFORM_EPS))
        return self.value(ell, z[0], z[1])


@dataclass(frozen=True)
class FunctionModel:
    """Single-level integrand ``f(u)`` of a ``dim``-dimensional uniform input."""

    func: object
    dim: int
    max_level: int = 1
    unit_work: float = 1.0

    @property
    def n_qoi(self) -> int:
        return int(np.size(self.func(np.full(self.dim, 0.5))))

    def sample_pair(self, ell, index, seed, method=METHOD_MLMC):
        u = RandomStream(seed, (method, ell, index)).uniform(self.dim)
        return np.atleast_1d(self.func(u)).astype(np.float64), None

    def work(self, ell):
        return self.unit_work

    def qmc_dimension(self, ell):
        return self.dim

    def evaluate_qmc(self, ell, point):
        return np.atleast_1d(self.func(np.asarray(point))).astype(np.float64)


def linear_functional(u):
    return 3.0 * u[..., 0] + 1.0


def first_coordinate(u):
    return u[..., 0]
