"""Nested simplicial grids on boxes and P1 finite element assembly.

Each tensor cell (square or cube) is split into ``d!`` Kuhn simplices, one per
ordering of the local coordinates. This triangulation is nested under uniform
refinement: every simplex at spacing ``h`` is the union of ``2**d`` simplices
at spacing ``h/2``, so white noise can be aggregated exactly from fine to
coarse cells.

A :class:`GridLevel` holds two grids that share vertices: the transport grid
on the tissue box G and the sampling grid on the padded box Ĝ.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

AXES = "xyz"


def face_name(axis: int, side: int) -> str:
    return ("-", "+")[side] + AXES[axis]


def all_faces(dim: int) -> tuple[str, ...]:
    return tuple(face_name(a, s) for a in range(dim) for s in (0, 1))


class GridError(ValueError):
    pass


class ResourceError(RuntimeError):
    """Requested grid exceeds the configured vertex cap."""


@dataclass(frozen=True)
class BoxDomain:
    """Tissue box ``G = prod [0, extents[i]]`` with tagged regions.

    ``gray`` is the shell of cells within ``gray_thickness`` of ∂G and
    ``white`` the interior. ``gray_roi`` and ``white_roi`` are the small
    boxes S_g and S_w given as ``((lo, hi), ...)`` per axis. Faces listed in
    ``zero_flux_faces`` form ∂G_V; the remaining faces form the Dirichlet set
    ∂G_S. ``padding`` is the width added on each side to build Ĝ.
    """

    extents: tuple
    padding: float
    gray_thickness: float
    gray_roi: tuple
    white_roi: tuple
    zero_flux_faces: tuple = ("-x",)

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(float(e) for e in self.extents))
        object.__setattr__(self, "gray_roi", tuple(tuple(map(float, b)) for b in self.gray_roi))
        object.__setattr__(self, "white_roi", tuple(tuple(map(float, b)) for b in self.white_roi))
        object.__setattr__(self, "zero_flux_faces", tuple(self.zero_flux_faces))
        if self.dim not in (2, 3):
            raise GridError("BoxDomain supports dimension 2 or 3")
        if any(e <= 0 for e in self.extents):
            raise GridError("box extents must be positive")
        if self.padding <= 0:
            raise GridError("padding must be positive so that G lies strictly inside Ĝ")
        faces = all_faces(self.dim)
        for f in self.zero_flux_faces:
            if f not in faces:
                raise GridError(f"unknown face {f!r}; expected one of {faces}")
        for name, roi in (("gray_roi", self.gray_roi), ("white_roi", self.white_roi)):
            if len(roi) != self.dim:
                raise GridError(f"{name} must give (lo, hi) for each of {self.dim} axes")
            for (lo, hi), ext in zip(roi, self.extents):
                if not (0 <= lo < hi <= ext):
                    raise GridError(f"{name} must lie inside G")

    @property
    def dim(self) -> int:
        return len(self.extents)

    @property
    def volume(self) -> float:
        return math.prod(self.extents)

    @property
    def dirichlet_faces(self) -> tuple[str, ...]:
        return tuple(f for f in all_faces(self.dim) if f not in self.zero_flux_faces)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * np.asarray(self.extents)


def _kuhn_permutations(dim: int):
    perms = list(itertools.permutations(range(dim)))
    code = {p: i for i, p in enumerate(perms)}
    return perms, code


class SimplexGrid:
    """Kuhn triangulation of a box with ``shape[i]`` tensor cells along axis ``i``."""

    def __init__(self, lower, spacing, shape):
        self.lower = np.asarray(lower, dtype=np.float64)
        self.spacing = np.asarray(spacing, dtype=np.float64)
        self.shape = tuple(int(n) for n in shape)
        self.dim = len(self.shape)
        d = self.dim
        self.vshape = tuple(n + 1 for n in self.shape)
        grids = np.meshgrid(*[np.arange(n) for n in self.vshape], indexing="ij")
        self.vertex_index = np.stack([g.ravel() for g in grids], axis=1)
        self.vertices = self.lower + self.vertex_index * self.spacing
        cubes = np.stack([g.ravel() for g in np.meshgrid(*[np.arange(n) for n in self.shape],
                                                        indexing="ij")], axis=1)
        perms, _ = _kuhn_permutations(d)
        nperm = len(perms)
        cells = np.empty((len(cubes), nperm, d + 1), dtype=np.int64)
        for p, perm in enumerate(perms):
            idx = cubes.copy()
            cells[:, p, 0] = np.ravel_multi_index(idx.T, self.vshape)
            for m, axis in enumerate(perm):
                idx[:, axis] += 1
                cells[:, p, m + 1] = np.ravel_multi_index(idx.T, self.vshape)
        self.cells = cells.reshape(-1, d + 1)
        self.n_vertices = len(self.vertices)
        self.n_cells = len(self.cells)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.spacing * np.asarray(self.shape)

    @cached_property
    def geometry(self):
        """Cell volumes and barycentric gradients, ``(n_cells,)`` and ``(n_cells, d+1, d)``."""
        x = self.vertices[self.cells]
        jac = np.transpose(x[:, 1:, :] - x[:, :1, :], (0, 2, 1))
        det = np.linalg.det(jac)
        inv = np.linalg.inv(jac)
        grads = np.empty((self.n_cells, self.dim + 1, self.dim))
        grads[:, 1:, :] = inv
        grads[:, 0, :] = -inv.sum(axis=1)
        volumes = np.abs(det) / math.factorial(self.dim)
        return volumes, grads

    @property
    def volumes(self) -> np.ndarray:
        return self.geometry[0]

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    @cached_property
    def cell_size(self) -> float:
        return float(np.max(self.spacing))

    def locate(self, points: np.ndarray):
        """Containing cell and barycentric coordinates for points inside the box."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        rel = (pts - self.lower) / self.spacing
        cube = np.clip(np.floor(rel).astype(np.int64), 0, np.asarray(self.shape) - 1)
        t = np.clip(rel - cube, 0.0, 1.0)
        order = np.argsort(-t, axis=1, kind="stable")
        perms, code = _kuhn_permutations(self.dim)
        pidx = np.array([code[tuple(row)] for row in order], dtype=np.int64)
        cube_id = np.ravel_multi_index(cube.T, self.shape)
        cell = cube_id * len(perms) + pidx
        ts = np.take_along_axis(t, order, axis=1)
        bary = np.empty((len(pts), self.dim + 1))
        bary[:, 0] = 1.0 - ts[:, 0]
        bary[:, 1:-1] = ts[:, :-1] - ts[:, 1:]
        bary[:, -1] = ts[:, -1]
        return cell, bary

    def interpolate(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Evaluate the P1 interpolant of nodal ``values`` (last axis) at ``points``."""
        cell, bary = self.locate(points)
        vals = np.asarray(values)[..., self.cells[cell]]
        return np.sum(vals * bary, axis=-1)

    @cached_property
    def _face_vertex_masks(self):
        masks = {}
        for a in range(self.dim):
            masks[face_name(a, 0)] = self.vertex_index[:, a] == 0
            masks[face_name(a, 1)] = self.vertex_index[:, a] == self.shape[a]
        return masks

    def face_vertices(self, faces) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        for f in faces:
            mask |= self._face_vertex_masks[f]
        return mask

    @cached_property
    def boundary_facets(self):
        """Boundary facets as ``(cell, local vertex positions, area, normal, face)`` arrays."""
        d = self.dim
        out_cells, out_local, out_area, out_normal, out_face = [], [], [], [], []
        for a in range(d):
            for s in (0, 1):
                name = face_name(a, s)
                on = self._face_vertex_masks[name][self.cells]
                hit = np.nonzero(on.sum(axis=1) == d)[0]
                local = np.array([np.nonzero(row)[0] for row in on[hit]], dtype=np.int64).reshape(-1, d)
                pts = self.vertices[self.cells[hit[:, None], local]]
                keep = [ax for ax in range(d) if ax != a]
                proj = pts[:, :, keep]
                if d == 2:
                    area = np.abs(proj[:, 1, 0] - proj[:, 0, 0])
                else:
                    e = proj[:, 1:, :] - proj[:, :1, :]
                    area = np.abs(np.linalg.det(e)) / math.factorial(d - 1)
                normal = np.zeros(d)
                normal[a] = -1.0 if s == 0 else 1.0
                out_cells.append(hit)
                out_local.append(local)
                out_area.append(area)
                out_normal.append(np.tile(normal, (len(hit), 1)))
                out_face.extend([name] * len(hit))
        return (np.concatenate(out_cells), np.concatenate(out_local), np.concatenate(out_area),
                np.concatenate(out_normal), np.array(out_face))

    @cached_property
    def _pattern(self):
        """CSR pattern of the P1 matrices plus the scatter map of local entries."""
        k = self.dim + 1
        rows = np.repeat(self.cells, k, axis=1).ravel()
        cols = np.tile(self.cells, (1, k)).ravel()
        key = rows * self.n_vertices + cols
        uniq, scatter = np.unique(key, return_inverse=True)
        r = uniq // self.n_vertices
        c = uniq % self.n_vertices
        indptr = np.zeros(self.n_vertices + 1, dtype=np.int64)
        np.add.at(indptr, r + 1, 1)
        indptr = np.cumsum(indptr)
        return indptr, c.astype(np.int64), scatter.ravel(), len(uniq)

    def matrix_from_local(self, local: np.ndarray) -> sp.csr_matrix:
        """Sum cell matrices ``local`` of shape ``(n_cells, d+1, d+1)`` into a CSR matrix."""
        indptr, indices, scatter, nnz = self._pattern
        data = np.bincount(scatter, weights=local.ravel(), minlength=nnz)
        return sp.csr_matrix((data, indices, indptr), shape=(self.n_vertices, self.n_vertices))

    @cached_property
    def lumped_mass(self) -> np.ndarray:
        """Row-sum lumped P1 mass: each vertex gets ``|cell|/(d+1)`` from every cell."""
        vol = self.volumes
        return np.bincount(self.cells.ravel(), weights=np.repeat(vol / (self.dim + 1), self.dim + 1),
                           minlength=self.n_vertices)

    @cached_property
    def unit_stiffness_local(self) -> np.ndarray:
        vol, grads = self.geometry
        return vol[:, None, None] * np.einsum("cid,cjd->cij", grads, grads)

    def region_weights(self, cell_mask: np.ndarray) -> np.ndarray:
        """Vertex weights ``w`` with ``w @ c`` the lumped integral of ``c`` over the masked cells."""
        mask = np.asarray(cell_mask, dtype=bool)
        if not mask.any():
            raise GridError("region is empty")
        vol = np.where(mask, self.volumes, 0.0)
        return np.bincount(self.cells.ravel(), weights=np.repeat(vol / (self.dim + 1), self.dim + 1),
                           minlength=self.n_vertices)

    def parent_map(self, coarse: "SimplexGrid") -> np.ndarray:
        """Index of the coarse cell containing each cell of this (once refined) grid."""
        cell, _ = coarse.locate(self.centroids)
        return cell


@dataclass(eq=False)
class GridLevel:
    """One level of the hierarchy: tissue grid, sampling grid and the maps between them."""

    level: int
    domain: BoxDomain
    inner: SimplexGrid
    outer: SimplexGrid
    inner_to_outer: np.ndarray
    pad_cells: tuple
    parent: np.ndarray | None = None          # outer cell -> outer cell of level-1
    children: np.ndarray | None = None        # (n_outer_cells of level-1, 2**d) children ids
    inner_parent: np.ndarray | None = None
    masks: dict = field(default_factory=dict)
    coarser: "GridLevel | None" = field(default=None, repr=False)
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def h(self) -> float:
        return self.inner.cell_size

    @cached_property
    def dirichlet(self) -> np.ndarray:
        return self.inner.face_vertices(self.domain.dirichlet_faces)

    @cached_property
    def outer_boundary(self) -> np.ndarray:
        return self.outer.face_vertices(all_faces(self.outer.dim))

    @cached_property
    def region_weights(self) -> dict:
        return {name: self.inner.region_weights(mask) for name, mask in self.masks.items()}


def _aligned(x: float, h: float) -> bool:
    q = x / h
    return abs(q - round(q)) < 1e-8


def build_hierarchy(domain: BoxDomain, base_cells, n_levels: int,
                    max_vertices: int = 4_000_000) -> list:
    """Nested grid levels ``1..n_levels``; level ``l`` has spacing ``h_1 * 2**-(l-1)``.

    Returns a list where entry ``l-1`` is level ``l``.
    """
    d = domain.dim
    if n_levels < 1:
        raise GridError("need at least one level")
    if np.isscalar(base_cells):
        base = tuple([int(base_cells)] * d)
    else:
        base = tuple(int(n) for n in base_cells)
    if len(base) != d or min(base) < 4:
        raise GridError("base resolution must give at least 4 cells per axis")
    ext = np.asarray(domain.extents)
    h1 = ext / np.asarray(base)
    pad = tuple(int(math.ceil(domain.padding / h - 1e-9)) for h in h1)
    for a in range(d):
        for x in (domain.gray_thickness, *domain.gray_roi[a], *domain.white_roi[a]):
            if not _aligned(x, h1[a]):
                raise GridError(f"region bounds must align with the level-1 grid (h={h1[a]:g} on axis {a})")
    fine_outer = math.prod((n + 2 * p) * 2 ** (n_levels - 1) + 1 for n, p in zip(base, pad))
    if fine_outer > max_vertices:
        raise ResourceError(f"finest sampling grid needs {fine_outer} vertices (cap {max_vertices})")

    levels = []
    for ell in range(1, n_levels + 1):
        f = 2 ** (ell - 1)
        h = h1 / f
        shape = tuple(n * f for n in base)
        pshape = tuple(p * f for p in pad)
        inner = SimplexGrid(np.zeros(d), h, shape)
        outer = SimplexGrid(-np.asarray(pshape) * h, h, tuple(n + 2 * p for n, p in zip(shape, pshape)))
        idx = inner.vertex_index + np.asarray(pshape)
        inner_to_outer = np.ravel_multi_index(idx.T, outer.vshape)
        lvl = GridLevel(ell, domain, inner, outer, inner_to_outer, pshape)
        lvl.masks = _region_masks(domain, inner)
        if levels:
            prev = levels[-1]
            lvl.parent = outer.parent_map(prev.outer)
            lvl.inner_parent = inner.parent_map(prev.inner)
            counts = np.bincount(lvl.parent, minlength=prev.outer.n_cells)
            if not np.all(counts == 2 ** d):
                raise GridError("refinement is not nested")
            lvl.children = np.argsort(lvl.parent, kind="stable").reshape(prev.outer.n_cells, 2 ** d)
            lvl.coarser = prev
        levels.append(lvl)
    return levels


def _region_masks(domain: BoxDomain, grid: SimplexGrid) -> dict:
    c = grid.centroids
    ext = np.asarray(domain.extents)
    dist = np.minimum(c, ext - c).min(axis=1)
    gray = dist < domain.gray_thickness
    masks = {"gray": gray, "white": ~gray}
    for name, roi in (("gray_roi", domain.gray_roi), ("white_roi", domain.white_roi)):
        lo = np.array([b[0] for b in roi])
        hi = np.array([b[1] for b in roi])
        masks[name] = np.all((c > lo) & (c < hi), axis=1)
    if not masks["white"].any():
        raise GridError("gray shell covers the whole box; white region is empty")
    if np.any(masks["gray_roi"] & ~gray):
        raise GridError("gray_roi must lie inside the gray shell")
    if np.any(masks["white_roi"] & gray):
        raise GridError("white_roi must lie inside the white interior")
    return masks


@dataclass
class AssembledOperators:
    """P1 operators of ``a(c, s) = <div(v c), s> + <D grad c, grad s> + <r c, s>``."""

    mass: np.ndarray               # lumped, one entry per vertex
    stiffness: sp.csr_matrix
    convection: sp.csr_matrix
    reaction: float
    dirichlet: np.ndarray          # indices of constrained vertices

    @property
    def system(self) -> sp.csr_matrix:
        """Matrix ``A`` with ``a(c, s) = s @ A @ c`` before boundary constraints."""
        return (self.stiffness + self.convection + sp.diags(self.reaction * self.mass)).tocsr()

    def bilinear(self, c, s) -> float:
        return float(np.asarray(s) @ (self.system @ np.asarray(c)))


def stiffness_matrix(grid: SimplexGrid, diffusion) -> sp.csr_matrix:
    """P1 stiffness for a nodal (P1) or constant coefficient, integrated exactly."""
    coeff = np.broadcast_to(np.asarray(diffusion, dtype=np.float64), (grid.n_vertices,))
    cell_mean = coeff[grid.cells].mean(axis=1)
    return grid.matrix_from_local(cell_mean[:, None, None] * grid.unit_stiffness_local)


def convection_matrix(grid: SimplexGrid, velocity: np.ndarray) -> sp.csr_matrix:
    """Convection in divergence form for a cellwise constant velocity.

    ``<div(v c), s>`` is evaluated after integration by parts as
    ``-<c v, grad s> + <(v.n) c, s>_{∂G}``, which is the exact distributional
    value for piecewise constant ``v`` (jumps in the normal component included).
    """
    v = np.asarray(velocity, dtype=np.float64)
    if v.shape != (grid.n_cells, grid.dim):
        raise GridError(f"velocity must have shape {(grid.n_cells, grid.dim)}, got {v.shape}")
    d = grid.dim
    vol, grads = grid.geometry
    vg = np.einsum("cid,cd->ci", grads, v)
    local = np.repeat((-vol[:, None] / (d + 1) * vg)[:, :, None], d + 1, axis=2)
    cells, loc, area, normal, _ = grid.boundary_facets
    flux = np.einsum("fd,fd->f", v[cells], normal) * area / (d * (d + 1))
    flat = local.reshape(len(local), -1)
    for a in range(d):
        for b in range(d):
            w = flux * (2.0 if a == b else 1.0)
            np.add.at(flat, (cells, loc[:, a] * (d + 1) + loc[:, b]), w)
    return grid.matrix_from_local(local)


def assemble(grid: SimplexGrid, diffusion, velocity=None, reaction: float = 0.0,
             dirichlet=None) -> AssembledOperators:
    if np.ndim(diffusion) > 0 and np.shape(diffusion) != (grid.n_vertices,):
        raise GridError(f"diffusion must have {grid.n_vertices} nodal values")
    if velocity is None:
        conv = sp.csr_matrix((grid.n_vertices, grid.n_vertices))
    else:
        conv = convection_matrix(grid, velocity)
    if dirichlet is None:
        dirichlet = np.zeros(0, dtype=np.int64)
    elif np.asarray(dirichlet).dtype == bool:
        dirichlet = np.nonzero(dirichlet)[0]
    return AssembledOperators(grid.lumped_mass, stiffness_matrix(grid, diffusion), conv,
                              float(reaction), np.asarray(dirichlet, dtype=np.int64))


def region_integral(grid: SimplexGrid, values, cell_mask) -> float:
    """Lumped-quadrature integral of nodal ``values`` over the masked cells."""
    return float(grid.region_weights(cell_mask) @ np.asarray(values))


def restrict_to_inner(outer_values: np.ndarray, level: GridLevel) -> np.ndarray:
    """Copy Ĝ-grid nodal values at the vertices shared with the G grid."""
    return np.asarray(outer_values)[..., level.inner_to_outer]


def prolong(coarse: SimplexGrid, fine: SimplexGrid, values: np.ndarray) -> np.ndarray:
    """Linear interpolation of coarse nodal values onto the fine vertices."""
    return coarse.interpolate(values, fine.vertices)


def write_grid(path, grid: SimplexGrid) -> None:
    """Plain-text export: a vertex block then a cell block, one entity per line."""
    with open(path, "w") as fh:
        fh.write(f"vertices {grid.n_vertices} {grid.dim}\n")
        np.savetxt(fh, grid.vertices, fmt="%.12g")
        fh.write(f"cells {grid.n_cells} {grid.dim + 1}\n")
        np.savetxt(fh, grid.cells, fmt="%d")
