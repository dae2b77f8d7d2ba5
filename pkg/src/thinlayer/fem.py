"""Conforming P1 triangles: meshing, assembly, linear solves.

Quadrature is the 3-point edge-midpoint rule on triangles (exact for the
quadratic products of P1 data) and 2-point Gauss on boundary segments.  The
1/eps layer weighting never rescales coordinates; it enters assembly purely
through per-region scale factors.

Meshes are structured: tensor grids for bulks and a "tube" grid following the
channel width function for the layer, with alternating quad diagonals.  With
an even resolution the triangulations are symmetric under the relevant
reflections, which the mirror-symmetry tests rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    MeshFailure,
    NoConvergence,
    NonpositiveWeight,
    NotSPD,
    UnknownTag,
)
from .geometry import ReferenceGeometry, TilingIndex

#: boundary tags subsumed by the alias 'exterior'
EXTERIOR_TAGS = ("wall", "lid+", "lid-", "face+", "face-")

_GAUSS_1D = np.array([-1.0, 1.0]) / np.sqrt(3.0)


# ---------------------------------------------------------------------------
# mesh data structure
# ---------------------------------------------------------------------------

@dataclass
class GridMeta:
    """Structured-lookup metadata for point location in a grid mesh.

    kind 'rect': tensor grid with x_nodes/y_nodes.
    kind 'tube': rows at z2_levels, row i-nodes at lo_row + (i/r)*w_row.
    grid holds vertex ids with shape (n_cols, n_rows).
    """

    kind: str
    grid: np.ndarray
    x_nodes: Optional[np.ndarray] = None
    y_nodes: Optional[np.ndarray] = None
    z2_levels: Optional[np.ndarray] = None
    lo_row: Optional[np.ndarray] = None
    w_row: Optional[np.ndarray] = None
    parity: int = 0  # diagonal convention offset after axis flips


@dataclass
class Mesh:
    """Triangle mesh with region tags, tagged boundary facets and P1 caches.

    The dof map is the identity on vertices; conformity (single dof per
    shared vertex) is what realizes continuity across internal interfaces.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    tri_region: np.ndarray
    facets: np.ndarray
    facet_tag: np.ndarray
    facet_owner: np.ndarray
    meta: Optional[GridMeta] = None
    extras: dict = field(default_factory=dict)

    areas: np.ndarray = field(init=False, repr=False)
    grads: np.ndarray = field(init=False, repr=False)
    midpoints: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = self.vertices
        t = self.triangles
        p = v[t]  # (nt, 3, 2)
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        self.areas = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        if np.any(self.areas <= 0):
            raise MeshFailure("triangulation contains nonpositive signed areas")
        # nodal basis gradients: grad phi_i = (y_j - y_k, x_k - x_j) / (2A)
        g = np.empty((len(t), 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            g[:, i, 0] = p[:, j, 1] - p[:, k, 1]
            g[:, i, 1] = p[:, k, 0] - p[:, j, 0]
        self.grads = g / (2.0 * self.areas)[:, None, None]
        # midpoint q is opposite local vertex q
        m = np.empty((len(t), 3, 2))
        for q in range(3):
            m[:, q] = 0.5 * (p[:, (q + 1) % 3] + p[:, (q + 2) % 3])
        self.midpoints = m

    @property
    def ndof(self) -> int:
        return len(self.vertices)

    def dof_of_vertex(self, v):
        return v  # vertex index == dof index

    def region_elements(self, names) -> np.ndarray:
        if isinstance(names, str):
            names = (names,)
        mask = np.isin(self.tri_region, list(names))
        return np.flatnonzero(mask)

    def facet_elements(self, tag) -> np.ndarray:
        tags = EXTERIOR_TAGS if tag == "exterior" else (tag,)
        present = set(np.unique(self.facet_tag))
        if tag != "exterior" and tag not in present:
            raise UnknownTag(f"no facets tagged '{tag}' (have {sorted(present)})")
        mask = np.isin(self.facet_tag, list(tags))
        if tag == "exterior" and not mask.any():
            raise UnknownTag("no exterior facets present")
        return np.flatnonzero(mask)

    def facet_geometry(self, idx):
        """Quadrature points, weights, outward normals for selected facets.

        Returns (points (nf,2,2), weights (nf,2), normals (nf,2)) with
        normals oriented away from the owning triangle.
        """
        a = self.vertices[self.facets[idx, 0]]
        b = self.vertices[self.facets[idx, 1]]
        tang = b - a
        length = np.linalg.norm(tang, axis=1)
        if np.any(length <= 0):
            raise MeshFailure("degenerate boundary facet")
        normal = np.column_stack([tang[:, 1], -tang[:, 0]]) / length[:, None]
        centroid = self.vertices[self.triangles[self.facet_owner[idx]]].mean(axis=1)
        mid = 0.5 * (a + b)
        flip = np.einsum("fi,fi->f", mid - centroid, normal) < 0
        normal[flip] *= -1.0
        pts = (
            mid[:, None, :]
            + 0.5 * _GAUSS_1D[None, :, None] * tang[:, None, :]
        )
        wts = np.repeat(0.5 * length[:, None], 2, axis=1)
        return pts, wts, normal


def write_mesh_text(mesh: Mesh, path):
    """Plain-text dump: `v x y`, `t i j k region`, `f i j tag` lines."""
    with open(path, "w") as fh:
        for x, y in mesh.vertices:
            fh.write(f"v {x!r} {y!r}\n")
        for tri, reg in zip(mesh.triangles, mesh.tri_region):
            fh.write(f"t {tri[0]} {tri[1]} {tri[2]} {reg}\n")
        for fac, tag in zip(mesh.facets, mesh.facet_tag):
            fh.write(f"f {fac[0]} {fac[1]} {tag}\n")


# ---------------------------------------------------------------------------
# mesh construction
# ---------------------------------------------------------------------------

class _Builder:
    """Accumulates vertices with dedup plus triangles and tagged facets."""

    def __init__(self):
        self.vertices = []
        self._key = {}
        self.tris = []
        self.regions = []
        self.facets = []
        self.tags = []
        self.owners = []

    def vertex(self, x, y) -> int:
        key = (round(x * 1e12), round(y * 1e12))
        vid = self._key.get(key)
        if vid is None:
            vid = len(self.vertices)
            self.vertices.append((x, y))
            self._key[key] = vid
        return vid

    def triangle(self, i, j, k, region) -> int:
        pi, pj, pk = (self.vertices[v] for v in (i, j, k))
        area2 = (pj[0] - pi[0]) * (pk[1] - pi[1]) - (pk[0] - pi[0]) * (pj[1] - pi[1])
        if area2 < 0:
            j, k = k, j
        elif area2 == 0:
            raise MeshFailure("degenerate triangle")
        self.tris.append((i, j, k))
        self.regions.append(region)
        return len(self.tris) - 1

    def facet(self, i, j, tag, owner):
        self.facets.append((i, j))
        self.tags.append(tag)
        self.owners.append(owner)

    def build(self, meta=None, extras=None) -> Mesh:
        return Mesh(
            vertices=np.array(self.vertices, dtype=float),
            triangles=np.array(self.tris, dtype=np.int64),
            tri_region=np.array(self.regions),
            facets=np.array(self.facets, dtype=np.int64).reshape(-1, 2),
            facet_tag=np.array(self.tags),
            facet_owner=np.array(self.owners, dtype=np.int64),
            meta=meta,
            extras=extras or {},
        )


def _grid_quads(builder, grid, region):
    """Triangulate a logically rectangular vertex grid with alternating
    diagonals; returns (quad -> (tri_a, tri_b)) ids."""
    ncol, nrow = grid.shape
    tri_ids = {}
    for j in range(nrow - 1):
        for i in range(ncol - 1):
            a, b = grid[i, j], grid[i + 1, j]
            c, d = grid[i + 1, j + 1], grid[i, j + 1]
            if (i + j) % 2 == 0:
                t1 = builder.triangle(a, b, c, region)
                t2 = builder.triangle(a, c, d, region)
            else:
                t1 = builder.triangle(a, b, d, region)
                t2 = builder.triangle(b, c, d, region)
            tri_ids[(i, j)] = (t1, t2)
    return tri_ids


def _quad_tri_for_facet(tri_ids, i, j, edge):
    """Pick the quad triangle adjacent to the given edge ('bottom', 'top',
    'left', 'right') under the alternating-diagonal convention."""
    t1, t2 = tri_ids[(i, j)]
    even = (i + j) % 2 == 0
    if edge == "bottom":
        return t1
    if edge == "top":
        return t2
    if edge == "left":
        return t2 if even else t1
    return t1 if even else t2


def mesh_cell(channel, r: int) -> Mesh:
    """Reference channel mesh: tube grid with r intervals across and along.

    Walls carry tag 'N'; the top/bottom faces carry 'S+'/'S-'.  Region name
    is 'cell'.  With even r the triangulation is symmetric under z2 -> -z2.
    """
    if r < 2:
        raise MeshFailure(f"resolution r must be >= 2, got {r}")
    b = _Builder()
    z2 = np.linspace(-1.0, 1.0, r + 1)
    lo, hi = channel.walls(z2)
    w = hi - lo
    grid = np.empty((r + 1, r + 1), dtype=np.int64)
    for j in range(r + 1):
        for i in range(r + 1):
            grid[i, j] = b.vertex(lo[j] + (i / r) * w[j], z2[j])
    tri_ids = _grid_quads(b, grid, "cell")
    for j in range(r):
        b.facet(grid[0, j], grid[0, j + 1], "N", _quad_tri_for_facet(tri_ids, 0, j, "left"))
        b.facet(grid[r, j], grid[r, j + 1], "N", _quad_tri_for_facet(tri_ids, r - 1, j, "right"))
    for i in range(r):
        b.facet(grid[i, 0], grid[i + 1, 0], "S-", _quad_tri_for_facet(tri_ids, i, 0, "bottom"))
        b.facet(grid[i, r], grid[i + 1, r], "S+", _quad_tri_for_facet(tri_ids, i, r - 1, "top"))
    meta = GridMeta(kind="tube", grid=grid, z2_levels=z2, lo_row=lo, w_row=w)
    return b.build(meta=meta, extras={"resolution": r})


def mesh_micro(
    geom: ReferenceGeometry,
    tiling: TilingIndex,
    r: int,
    bulk_rows: int | None = None,
) -> Mesh:
    """Mesh of the full reference micro domain: two bulks plus the channels.

    Each channel repeats the reference cell mesh scaled by eps, so channel
    vertices pull back to identical cell coordinates in every cell (the
    unfolding map is then a pure re-indexing, recorded in
    extras['cell_vertex_ids']).  Bulk grids place their interface-row nodes
    exactly on the channel face nodes, which makes the mesh conforming: every
    face vertex is shared by bulk and channel triangles.
    """
    if r < 2:
        raise MeshFailure(f"resolution r must be >= 2, got {r}")
    eps, K = tiling.eps, tiling.n_cells
    H = geom.half_height
    cell = mesh_cell(geom.channel, r)
    b = _Builder()

    # channels: map the cell template into each tile
    cell_vertex_ids = np.empty((K, cell.ndof), dtype=np.int64)
    for k in range(K):
        ids = [
            b.vertex(eps * (k + z1), eps * z2) for z1, z2 in cell.vertices
        ]
        cell_vertex_ids[k] = ids
        local = np.array(ids)
        tri_map = {}
        for t_idx, tri in enumerate(cell.triangles):
            tri_map[t_idx] = b.triangle(*(local[tri]), "channel")
        for fac, tag, owner in zip(cell.facets, cell.facet_tag, cell.facet_owner):
            b.facet(local[fac[0]], local[fac[1]], tag, tri_map[owner])

    # bulk column coordinates: cell corners plus the face abscissas
    z2_top = cell.meta.z2_levels[-1]
    lo_t, hi_t = geom.channel.walls(np.array([1.0]))
    lo_b, hi_b = geom.channel.walls(np.array([-1.0]))
    face_top = [cell.vertices[cell.meta.grid[i, r], 0] for i in range(r + 1)]
    face_bot = [cell.vertices[cell.meta.grid[i, 0], 0] for i in range(r + 1)]

    def _columns(face):
        cols = set()
        for k in range(K + 1):
            cols.add(round(eps * k, 15))
        for k in range(K):
            for z1 in face:
                cols.add(round(eps * (k + z1), 15))
        return np.array(sorted(cols))

    x_top = _columns(face_top)
    x_bot = _columns(face_bot)
    if bulk_rows is None:
        bulk_rows = max(2, int(np.ceil((H - eps) * r / (2.0 * eps))))
    y_rows = np.linspace(eps, H, bulk_rows + 1)

    def _face_spans(face):
        spans = []
        for k in range(K):
            spans.append((eps * (k + face[0]) - 1e-12, eps * (k + face[-1]) + 1e-12))
        return spans

    for sign, x_cols, face in (
        (+1, x_top, face_top),
        (-1, x_bot, face_bot),
    ):
        grid = np.empty((len(x_cols), len(y_rows)), dtype=np.int64)
        for j, y in enumerate(y_rows):
            for i, x in enumerate(x_cols):
                grid[i, j] = b.vertex(x, sign * y)
        region = "bulk+" if sign > 0 else "bulk-"
        tri_ids = _grid_quads(b, grid, region)
        nrow = len(y_rows) - 1
        spans = _face_spans(face)
        for i in range(len(x_cols) - 1):
            midx = 0.5 * (x_cols[i] + x_cols[i + 1])
            inside = any(lo <= midx <= hi for lo, hi in spans)
            if not inside:
                tag = "face+" if sign > 0 else "face-"
                b.facet(grid[i, 0], grid[i + 1, 0],
                        tag, _quad_tri_for_facet(tri_ids, i, 0, "bottom"))
            tag = "lid+" if sign > 0 else "lid-"
            b.facet(grid[i, nrow], grid[i + 1, nrow],
                    tag, _quad_tri_for_facet(tri_ids, i, nrow - 1, "top"))
        for j in range(nrow):
            b.facet(grid[0, j], grid[0, j + 1],
                    "wall", _quad_tri_for_facet(tri_ids, 0, j, "left"))
            b.facet(grid[-1, j], grid[-1, j + 1],
                    "wall", _quad_tri_for_facet(tri_ids, len(x_cols) - 2, j, "right"))

    mesh = b.build(
        extras={
            "eps": eps,
            "resolution": r,
            "cell_mesh": cell,
            "cell_vertex_ids": cell_vertex_ids,
            "bulk_rows": bulk_rows,
        }
    )
    _audit_interface_conformity(mesh)
    return mesh


def _audit_interface_conformity(mesh: Mesh):
    """Every face vertex must belong to both a bulk and a channel triangle."""
    for tag, bulk in (("S+", "bulk+"), ("S-", "bulk-")):
        idx = mesh.facet_elements(tag)
        face_verts = np.unique(mesh.facets[idx])
        chan_verts = np.unique(mesh.triangles[mesh.region_elements("channel")])
        bulk_verts = np.unique(mesh.triangles[mesh.region_elements(bulk)])
        if not (
            np.all(np.isin(face_verts, chan_verts))
            and np.all(np.isin(face_verts, bulk_verts))
        ):
            raise MeshFailure(f"interface {tag} is not conforming")


def mesh_rectangle(x_nodes, y_nodes, region: str, tags=None) -> Mesh:
    """Structured rectangle mesh; boundary tags default to 'wall'/'lid'/'face'.

    tags, when given, maps the sides 'left'/'right'/'bottom'/'top' to tag
    names (use None to skip a side).
    """
    x_nodes = np.asarray(x_nodes, float)
    y_nodes = np.asarray(y_nodes, float)
    tags = tags or {
        "left": "wall",
        "right": "wall",
        "bottom": "face-",
        "top": "lid+",
    }
    b = _Builder()
    grid = np.empty((len(x_nodes), len(y_nodes)), dtype=np.int64)
    for j, y in enumerate(y_nodes):
        for i, x in enumerate(x_nodes):
            grid[i, j] = b.vertex(x, y)
    tri_ids = _grid_quads(b, grid, region)
    ni, nj = len(x_nodes) - 1, len(y_nodes) - 1
    if tags.get("bottom"):
        for i in range(ni):
            b.facet(grid[i, 0], grid[i + 1, 0],
                    tags["bottom"], _quad_tri_for_facet(tri_ids, i, 0, "bottom"))
    if tags.get("top"):
        for i in range(ni):
            b.facet(grid[i, nj], grid[i + 1, nj],
                    tags["top"], _quad_tri_for_facet(tri_ids, i, nj - 1, "top"))
    if tags.get("left"):
        for j in range(nj):
            b.facet(grid[0, j], grid[0, j + 1],
                    tags["left"], _quad_tri_for_facet(tri_ids, 0, j, "left"))
    if tags.get("right"):
        for j in range(nj):
            b.facet(grid[-1, j], grid[-1, j + 1],
                    tags["right"], _quad_tri_for_facet(tri_ids, ni - 1, j, "right"))
    # point location requires ascending node arrays; normalize the metadata
    mx, my, mgrid, parity = x_nodes, y_nodes, grid, 0
    if len(mx) > 1 and mx[1] < mx[0]:
        mx, mgrid = mx[::-1], mgrid[::-1, :]
        # index shift (ni-2-i) plus the diagonal-type swap of the flip
        parity ^= (len(mx) - 1) % 2
    if len(my) > 1 and my[1] < my[0]:
        my, mgrid = my[::-1], mgrid[:, ::-1]
        parity ^= (len(my) - 1) % 2
    meta = GridMeta(kind="rect", grid=mgrid, x_nodes=mx, y_nodes=my, parity=parity)
    return b.build(meta=meta)


def mesh_unit_square(n: int) -> Mesh:
    nodes = np.linspace(0.0, 1.0, n + 1)
    return mesh_rectangle(nodes, nodes, "domain")


def mesh_bulk_pair(H: float, x_nodes, ny: int):
    """Macro bulk meshes on (0,1)x(0,H) and (0,1)x(-H,0).

    The lower mesh mirrors the upper one so mirror-symmetric solutions are
    represented exactly.  Interface rows sit at y = 0.
    """
    x_nodes = np.asarray(x_nodes, float)
    y_up = np.linspace(0.0, H, ny + 1)
    plus = mesh_rectangle(
        x_nodes, y_up, "bulk+",
        tags={"left": "wall", "right": "wall", "bottom": "interface", "top": "lid+"},
    )
    minus = mesh_rectangle(
        x_nodes, -y_up, "bulk-",
        tags={"left": "wall", "right": "wall", "bottom": "interface", "top": "lid-"},
    )
    return plus, minus


def interface_vertices(mesh: Mesh) -> np.ndarray:
    """Vertex ids on the interface row y = 0 of a macro bulk mesh, sorted
    by abscissa."""
    ids = np.flatnonzero(np.abs(mesh.vertices[:, 1]) < 1e-14)
    order = np.argsort(mesh.vertices[ids, 0])
    return ids[order]


# ---------------------------------------------------------------------------
# point location / P1 evaluation on structured meshes
# ---------------------------------------------------------------------------

def _locate_structured(mesh: Mesh, pts) -> tuple[np.ndarray, np.ndarray]:
    """Map points to (quad i, quad j, local coords) using the grid meta."""
    meta = mesh.meta
    if meta is None:
        raise MeshFailure("mesh carries no structured metadata")
    pts = np.atleast_2d(np.asarray(pts, float))
    if meta.kind == "rect":
        xs, ys = meta.x_nodes, meta.y_nodes
        i = np.clip(np.searchsorted(xs, pts[:, 0], side="right") - 1, 0, len(xs) - 2)
        j = np.clip(np.searchsorted(ys, pts[:, 1], side="right") - 1, 0, len(ys) - 2)
        return i, j
    # tube grid: interpolate wall lines between rows
    z2s = meta.z2_levels
    j = np.clip(np.searchsorted(z2s, pts[:, 1], side="right") - 1, 0, len(z2s) - 2)
    s = (pts[:, 1] - z2s[j]) / (z2s[j + 1] - z2s[j])
    lo = (1 - s) * meta.lo_row[j] + s * meta.lo_row[j + 1]
    w = (1 - s) * meta.w_row[j] + s * meta.w_row[j + 1]
    r = meta.grid.shape[0] - 1
    i = np.clip(np.floor((pts[:, 0] - lo) / w * r).astype(int), 0, r - 1)
    return i, j


def p1_interpolation(mesh: Mesh, pts):
    """Vertex ids and barycentric weights of points in a structured mesh.

    Returns (verts (n,3), weights (n,3)); of the two candidate triangles per
    quad the one containing the point (largest minimal coordinate) wins.
    """
    pts = np.atleast_2d(np.asarray(pts, float))
    i, j = _locate_structured(mesh, pts)
    grid = mesh.meta.grid
    a = grid[i, j]
    b_ = grid[i + 1, j]
    c = grid[i + 1, j + 1]
    d = grid[i, j + 1]
    even = (i + j + mesh.meta.parity) % 2 == 0
    tris = np.where(
        even[:, None, None],
        np.stack([np.stack([a, b_, c], axis=1), np.stack([a, c, d], axis=1)], axis=1),
        np.stack([np.stack([a, b_, d], axis=1), np.stack([b_, c, d], axis=1)], axis=1),
    )  # (n, 2, 3)
    verts = np.empty((len(pts), 3), dtype=np.int64)
    weights = np.empty((len(pts), 3))
    best = np.full(len(pts), -np.inf)
    for cand in range(2):
        tri = tris[:, cand, :]
        p = mesh.vertices[tri]  # (n,3,2)
        v0 = p[:, 1] - p[:, 0]
        v1 = p[:, 2] - p[:, 0]
        den = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
        dp = pts - p[:, 0]
        l1 = (dp[:, 0] * v1[:, 1] - dp[:, 1] * v1[:, 0]) / den
        l2 = (v0[:, 0] * dp[:, 1] - v0[:, 1] * dp[:, 0]) / den
        l0 = 1.0 - l1 - l2
        score = np.minimum(np.minimum(l0, l1), l2)
        take = score > best
        verts[take] = tri[take]
        weights[take] = np.column_stack([l0, l1, l2])[take]
        best[take] = score[take]
    return verts, weights


def p1_interpolation_matrix(mesh: Mesh, pts) -> sp.csr_matrix:
    """Sparse (n_points x ndof) interpolation operator of a structured mesh."""
    verts, weights = p1_interpolation(mesh, pts)
    n = len(verts)
    rows = np.repeat(np.arange(n), 3)
    return sp.coo_matrix(
        (weights.ravel(), (rows, verts.ravel())), shape=(n, mesh.ndof)
    ).tocsr()


def evaluate_p1(mesh: Mesh, values: np.ndarray, pts) -> np.ndarray:
    """Evaluate a P1 field at points of a structured mesh."""
    verts, weights = p1_interpolation(mesh, pts)
    return np.einsum("nk,nk->n", weights, values[verts])


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _coefficient_at_midpoints(coeff, mesh, elems, tensor_shape):
    """Normalize a coefficient spec to an array over (elems, 3 midpoints).

    Accepted forms: scalar / constant array of tensor_shape, a precomputed
    array of shape (len(elems), 3) + tensor_shape, or a callable on stacked
    quadrature points.
    """
    n = len(elems)
    full_shape = (n, 3) + tensor_shape
    if callable(coeff):
        pts = mesh.midpoints[elems].reshape(-1, 2)
        vals = np.asarray(coeff(pts), float)
        return vals.reshape(full_shape)
    arr = np.asarray(coeff, float)
    if arr.shape == full_shape:
        return arr
    if arr.shape == tensor_shape or arr.ndim == 0:
        return np.broadcast_to(arr, full_shape)
    raise ValueError(f"coefficient shape {arr.shape} not understood")


# basis values at the edge midpoints: B[q, i] = phi_i(m_q)
_B_MID = 0.5 * (1.0 - np.eye(3))


def assemble_weighted_mass(mesh: Mesh, weight, region_scale: dict) -> sp.csr_matrix:
    """Weighted mass matrix sum over regions with per-region scale factors.

    Entry (i,j) = sum_regions scale * int_region weight * phi_i phi_j with
    the 3-point midpoint rule.  The weight must stay positive on quadrature
    points.
    """
    rows, cols, vals = [], [], []
    nd = mesh.ndof
    for region, scale in region_scale.items():
        if scale == 0.0:
            continue
        elems = mesh.region_elements(region)
        if len(elems) == 0:
            continue
        wq = _coefficient_at_midpoints(weight, mesh, elems, ())
        if np.min(wq) <= 0.0:
            raise NonpositiveWeight(
                f"mass weight min {np.min(wq):.3e} <= 0 on region '{region}'"
            )
        coef = (scale / 3.0) * mesh.areas[elems][:, None] * wq  # (n,3)
        local = np.einsum("eq,qi,qj->eij", coef, _B_MID, _B_MID)
        tri = mesh.triangles[elems]
        rows.append(np.repeat(tri, 3, axis=1).ravel())
        cols.append(np.tile(tri, (1, 3)).ravel())
        vals.append(local.ravel())
    if not rows:
        return sp.csr_matrix((nd, nd))
    M = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nd, nd),
    )
    return M.tocsr()


def assemble_operator(
    mesh: Mesh,
    diffusion,
    velocity,
    region_scale_diff: dict,
    region_scale_adv: dict,
) -> sp.csr_matrix:
    """Diffusion-advection operator matrix.

    Entry (i,j) = sum int scale_d * (D grad phi_j) . grad phi_i
                - sum int scale_a * (phi_j v) . grad phi_i.
    The diffusion block is symmetric by construction; a NotSPD error fires if
    sampled diffusion tensors fail symmetry (1e-12) or positivity.
    """
    rows, cols, vals = [], [], []
    nd = mesh.ndof

    if diffusion is not None:
        for region, scale in region_scale_diff.items():
            if scale == 0.0:
                continue
            elems = mesh.region_elements(region)
            if len(elems) == 0:
                continue
            Dq = _coefficient_at_midpoints(diffusion, mesh, elems, (2, 2))
            if np.max(np.abs(Dq - np.swapaxes(Dq, -1, -2))) > 1e-12:
                raise NotSPD(f"diffusion tensor not symmetric on '{region}'")
            det = Dq[..., 0, 0] * Dq[..., 1, 1] - Dq[..., 0, 1] * Dq[..., 1, 0]
            if np.any(det <= 0.0) or np.any(Dq[..., 0, 0] <= 0.0):
                raise NotSPD(f"diffusion tensor not positive definite on '{region}'")
            Dbar = Dq.mean(axis=1)  # exact: P1 gradients are constant
            g = mesh.grads[elems]
            Dg = np.einsum("ekl,ejl->ejk", Dbar, g)  # Dg[e,j,:] = D grad phi_j
            local = scale * np.einsum("e,ejk,eik->eij", mesh.areas[elems], Dg, g)
            tri = mesh.triangles[elems]
            rows.append(np.repeat(tri, 3, axis=1).ravel())
            cols.append(np.tile(tri, (1, 3)).ravel())
            vals.append(local.ravel())

    if velocity is not None:
        for region, scale in region_scale_adv.items():
            if scale == 0.0:
                continue
            elems = mesh.region_elements(region)
            if len(elems) == 0:
                continue
            vq = _coefficient_at_midpoints(velocity, mesh, elems, (2,))
            g = mesh.grads[elems]
            coef = (scale / 3.0) * mesh.areas[elems]
            # entry (i,j) -= coef * sum_q phi_j(m_q) v_q . grad phi_i
            local = -np.einsum(
                "e,eqk,eik,qj->eij", coef, vq, g, _B_MID
            )
            tri = mesh.triangles[elems]
            rows.append(np.repeat(tri, 3, axis=1).ravel())
            cols.append(np.tile(tri, (1, 3)).ravel())
            vals.append(local.ravel())

    if not rows:
        return sp.csr_matrix((nd, nd))
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nd, nd),
    )
    return A.tocsr()


def assemble_load(mesh: Mesh, density, region_scale: dict) -> np.ndarray:
    """Load vector int scale * density * phi_i with the midpoint rule.

    density: callable(points)->(n,), or array (n_elems, 3), or scalar.
    """
    out = np.zeros(mesh.ndof)
    for region, scale in region_scale.items():
        if scale == 0.0:
            continue
        elems = mesh.region_elements(region)
        if len(elems) == 0:
            continue
        fq = _coefficient_at_midpoints(density, mesh, elems, ())
        coef = (scale / 3.0) * mesh.areas[elems][:, None] * fq
        local = coef @ _B_MID  # (n,3) basis-weighted
        np.add.at(out, mesh.triangles[elems].ravel(), local.ravel())
    return out


def assemble_boundary(mesh: Mesh, tag, weight, mode="mass", load_fn=None):
    """1-D boundary assembly over tagged facets with 2-point Gauss quadrature.

    mode 'mass' returns the matrix int weight * phi_i phi_j dH; mode 'load'
    returns the vector int weight * load_fn * phi_i dH.  Weight and load
    callables receive (points, normals); arrays of shape (n_facets, 2) are
    accepted as precomputed quadrature values.
    """
    idx = mesh.facet_elements(tag)
    pts, wts, normals = mesh.facet_geometry(idx)
    nf = len(idx)

    def _at_quad(fun):
        if callable(fun):
            flat = pts.reshape(-1, 2)
            nrm = np.repeat(normals, 2, axis=0)
            return np.asarray(fun(flat, nrm), float).reshape(nf, 2)
        arr = np.asarray(fun, float)
        if arr.shape == (nf, 2):
            return arr
        return np.broadcast_to(arr, (nf, 2))

    wq = _at_quad(weight)
    # P1 basis on a segment at the Gauss points
    s = 0.5 * (_GAUSS_1D + 1.0)
    basis = np.stack([1.0 - s, s], axis=1)  # (2 gauss, 2 basis)
    if mode == "mass":
        local = np.einsum("fg,fg,ga,gb->fab", wts, wq, basis, basis)
        fac = mesh.facets[idx]
        rows = np.repeat(fac, 2, axis=1).ravel()
        cols = np.tile(fac, (1, 2)).ravel()
        M = sp.coo_matrix(
            (local.ravel(), (rows, cols)), shape=(mesh.ndof, mesh.ndof)
        )
        return M.tocsr()
    if mode == "load":
        gq = _at_quad(load_fn)
        local = np.einsum("fg,fg,fg,ga->fa", wts, wq, gq, basis)
        out = np.zeros(mesh.ndof)
        np.add.at(out, mesh.facets[idx].ravel(), local.ravel())
        return out
    raise ValueError(f"unknown boundary mode '{mode}'")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

@dataclass
class SparseSystem:
    """CSR matrix, right-hand side and optional fixed-dof constraints."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    constraints: list | None = None

    def __post_init__(self):
        n, m = self.matrix.shape
        if n != m or len(self.rhs) != n:
            raise ValueError("system dimensions inconsistent")


def apply_constraints(A: sp.csr_matrix, b: np.ndarray, constraints):
    """Symmetric elimination of fixed dofs (dof, value).

    Known columns move to the right-hand side; constrained rows and columns
    are zeroed and replaced by the identity, keeping symmetry of symmetric
    inputs.
    """
    n = A.shape[0]
    dofs = np.array([d for d, _ in constraints], dtype=int)
    vals = np.array([v for _, v in constraints], dtype=float)
    b = b - A[:, dofs] @ vals
    keep = np.ones(n)
    keep[dofs] = 0.0
    K = sp.diags(keep)
    fix = np.zeros(n)
    fix[dofs] = 1.0
    A2 = (K @ A @ K + sp.diags(fix)).tocsr()
    b = keep * b
    b[dofs] = vals
    return A2, b


def solve_linear(system: SparseSystem, tol: float = 1e-10, max_iter=None) -> np.ndarray:
    """Solve to a relative residual <= tol.

    BiCGSTAB with a diagonal preconditioner is the primary route; systems of
    dimension <= 2000 fall back to dense LU when the iteration stalls.
    """
    A, b = system.matrix, np.asarray(system.rhs, float)
    if system.constraints:
        A, b = apply_constraints(A, b, system.constraints)
    n = A.shape[0]
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)

    diag = A.diagonal()
    diag = np.where(np.abs(diag) > 1e-300, diag, 1.0)
    M = spla.LinearOperator((n, n), matvec=lambda x: x / diag)
    maxiter = max_iter if max_iter is not None else 20 * n
    x, info = spla.bicgstab(A, b, rtol=tol, atol=0.0, M=M, maxiter=maxiter)
    res = np.linalg.norm(A @ x - b) / bnorm
    if res <= tol:
        return x
    # one defect-correction pass often recovers a near-miss
    if info == 0 or res < 1e-6:
        dx, _ = spla.bicgstab(A, b - A @ x, rtol=tol, atol=0.0, M=M, maxiter=maxiter)
        x = x + dx
        res = np.linalg.norm(A @ x - b) / bnorm
        if res <= tol:
            return x
    if n <= 2000:
        try:
            x = np.linalg.solve(A.toarray(), b)
        except np.linalg.LinAlgError:
            raise NoConvergence(maxiter, res) from None
        res = np.linalg.norm(A @ x - b) / bnorm
        if res <= max(tol, 1e-9):
            return x
    raise NoConvergence(maxiter, res)
