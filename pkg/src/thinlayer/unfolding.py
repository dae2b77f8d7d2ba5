"""Discrete unfold/average operators and the micro-to-macro error norms.

The unfold operator reads a layer field at ``eps*(k, 0) + eps*z``, producing
values indexed by (macro cell k, cell-mesh dof).  Because every channel of
the micro mesh is the eps-scaled copy of one reference cell mesh, unfolding
onto that same cell mesh is a pure re-indexing and the operator identities
hold to round-off:

  * norm identity        ||T v||_{Sigma x Z_*} = eps^{-1/2} ||v||_{layer}
  * gradient commutation grad_z(T v) = eps * T(grad_x v)
  * adjoint              <U phi, v>_{layer} = eps <phi, T v>_{Sigma x Z_*}

The averaging operator is realized literally as the matrix adjoint of
eps * T with respect to the two discrete mass inner products, so adjointness
is exact at matrix level whatever the cell mesh.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .errors import LayoutMismatch, OutOfLayer, TimeMismatch
from .fem import Mesh


@dataclass
class UnfoldedField:
    """Values indexed by (macro cell k, cell-mesh dof)."""

    values: np.ndarray  # (n_cells, n_cell_dofs)
    cell_mesh: Mesh
    eps: float

    @property
    def n_cells(self):
        return self.values.shape[0]

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("k,dof,value\n")
            for k in range(self.n_cells):
                for d, v in enumerate(self.values[k]):
                    fh.write(f"{k},{d},{v!r}\n")


def _cell_mass(cell_mesh: Mesh) -> sp.csr_matrix:
    cache = cell_mesh.extras.setdefault("_unfold_cache", {})
    if "M_Z" not in cache:
        cache["M_Z"] = fem.assemble_weighted_mass(cell_mesh, 1.0, {"cell": 1.0})
    return cache["M_Z"]


def _matched(micro_mesh: Mesh, cell_mesh: Mesh) -> bool:
    template = micro_mesh.extras["cell_mesh"]
    if cell_mesh is template:
        return True
    return (
        cell_mesh.ndof == template.ndof
        and np.array_equal(cell_mesh.triangles, template.triangles)
        and np.allclose(cell_mesh.vertices, template.vertices, atol=1e-14)
    )


def _check_inside(template: Mesh, z):
    """Evaluation points must stay inside the reference channel."""
    meta = template.meta
    z = np.atleast_2d(z)
    tol = 1e-9
    if np.any(np.abs(z[:, 1]) > 1.0 + tol):
        raise OutOfLayer("cell coordinate z2 outside [-1, 1]")
    j = np.clip(
        np.searchsorted(meta.z2_levels, z[:, 1], side="right") - 1,
        0,
        len(meta.z2_levels) - 2,
    )
    s = np.clip(
        (z[:, 1] - meta.z2_levels[j]) / np.diff(meta.z2_levels)[j], 0.0, 1.0
    )
    lo = (1 - s) * meta.lo_row[j] + s * meta.lo_row[j + 1]
    w = (1 - s) * meta.w_row[j] + s * meta.w_row[j + 1]
    if np.any(z[:, 0] < lo - tol) or np.any(z[:, 0] > lo + w + tol):
        raise OutOfLayer("cell coordinate z1 outside the channel walls")


def unfold(micro_mesh: Mesh, field: np.ndarray, eps: float,
           cell_mesh: Mesh | None = None) -> UnfoldedField:
    """Unfold a P1 micro field onto a cell mesh on the reference channel.

    With the pulled-back micro cell mesh (default) this is exact
    re-indexing; a different cell mesh triggers P1 interpolation inside each
    channel.
    """
    if abs(micro_mesh.extras.get("eps", -1.0) - eps) > 1e-12:
        raise LayoutMismatch("field/mesh eps inconsistent with the tiling")
    ids = micro_mesh.extras["cell_vertex_ids"]
    template = micro_mesh.extras["cell_mesh"]
    if cell_mesh is None or _matched(micro_mesh, cell_mesh):
        return UnfoldedField(values=field[ids].copy(), cell_mesh=template, eps=eps)
    _check_inside(template, cell_mesh.vertices)
    P = fem.p1_interpolation_matrix(template, cell_mesh.vertices)
    vals = np.array([P @ field[ids[k]] for k in range(ids.shape[0])])
    return UnfoldedField(values=vals, cell_mesh=cell_mesh, eps=eps)


def unfolded_norm(unf: UnfoldedField) -> float:
    """L2 norm over (interface) x (reference channel)."""
    M = _cell_mass(unf.cell_mesh)
    acc = sum(v @ M @ v for v in unf.values)
    return float(np.sqrt(unf.eps * acc))


def layer_dofs(micro_mesh: Mesh) -> np.ndarray:
    """Vertices belonging to channel elements (support of layer fields)."""
    return np.unique(micro_mesh.triangles[micro_mesh.region_elements("channel")])


def _unfold_matrix(micro_mesh: Mesh, cell_mesh: Mesh) -> sp.csr_matrix:
    """T as a sparse map from micro dofs to stacked (cell, dof) values."""
    ids = micro_mesh.extras["cell_vertex_ids"]
    template = micro_mesh.extras["cell_mesh"]
    K, nc = ids.shape
    if _matched(micro_mesh, cell_mesh):
        rows = np.arange(K * nc)
        cols = ids.ravel()
        vals = np.ones(K * nc)
        return sp.coo_matrix(
            (vals, (rows, cols)), shape=(K * nc, micro_mesh.ndof)
        ).tocsr()
    P = fem.p1_interpolation_matrix(template, cell_mesh.vertices)
    blocks = []
    for k in range(K):
        sel = sp.coo_matrix(
            (np.ones(nc), (np.arange(nc), ids[k])),
            shape=(nc, micro_mesh.ndof),
        )
        blocks.append(P @ sel.tocsr())
    return sp.vstack(blocks).tocsr()


def average(unf: UnfoldedField, micro_mesh: Mesh) -> np.ndarray:
    """Adjoint of eps*unfold with respect to the discrete mass products.

    Returns a field on the micro mesh supported on the layer vertices,
    satisfying <U phi, v>_layer = eps <phi, T v> exactly at matrix level.
    """
    eps = unf.eps
    ids = micro_mesh.extras["cell_vertex_ids"]
    if unf.values.shape[0] != ids.shape[0]:
        raise LayoutMismatch(
            f"unfolded field has {unf.values.shape[0]} cells, tiling has "
            f"{ids.shape[0]}"
        )
    T = _unfold_matrix(micro_mesh, unf.cell_mesh)
    if unf.values.shape[1] != T.shape[0] // ids.shape[0]:
        raise LayoutMismatch("cell-dof layout inconsistent with the cell mesh")
    M_Z = _cell_mass(unf.cell_mesh)
    M_unf = eps * sp.block_diag([M_Z] * ids.shape[0], format="csr")
    rhs = eps * (T.T @ (M_unf @ unf.values.ravel()))
    dofs = layer_dofs(micro_mesh)
    M_layer = fem.assemble_weighted_mass(micro_mesh, 1.0, {"channel": 1.0})
    M_ll = M_layer[dofs][:, dofs].tocsc()
    out = np.zeros(micro_mesh.ndof)
    out[dofs] = spla.spsolve(M_ll, rhs[dofs])
    return out


def layer_inner(micro_mesh: Mesh, u, v) -> float:
    """Unweighted L2 inner product over the channel region."""
    M = fem.assemble_weighted_mass(micro_mesh, 1.0, {"channel": 1.0})
    return float(u @ M @ v)


def unfolded_inner(unf_a: UnfoldedField, unf_b: UnfoldedField) -> float:
    M = _cell_mass(unf_a.cell_mesh)
    acc = sum(a @ M @ b for a, b in zip(unf_a.values, unf_b.values))
    return float(unf_a.eps * acc)


def gradient_commutation_check(micro_mesh: Mesh, field: np.ndarray, eps: float,
                               cell_mesh: Mesh | None = None) -> float:
    """Max defect of grad_z(T v) = eps * T(grad_x v) over cells/elements.

    Exact (<= 1e-13) on the matched cell mesh; with a different cell mesh the
    defect is the P1 interpolation error of the gradient, O(1/r).
    """
    unf = unfold(micro_mesh, field, eps, cell_mesh)
    cm = unf.cell_mesh
    # left side: element gradients of the unfolded field on the cell mesh
    tri = cm.triangles
    grads_lhs = np.einsum(
        "kei,eid->ked", unf.values[:, tri], cm.grads
    )  # (K, n_elems, 2)
    # right side: micro element gradients sampled at cell-element centroids
    ch = micro_mesh.region_elements("channel")
    ids = micro_mesh.extras["cell_vertex_ids"]
    K = ids.shape[0]
    micro_tri = micro_mesh.triangles[ch]
    micro_grad = np.einsum(
        "ei,eid->ed", field[micro_tri], micro_mesh.grads[ch]
    ).reshape(K, -1, 2)
    if _matched(micro_mesh, cm):
        grads_rhs = eps * micro_grad  # element order matches by construction
    else:
        template = micro_mesh.extras["cell_mesh"]
        centroids = cm.vertices[cm.triangles].mean(axis=1)
        verts, _ = fem.p1_interpolation(template, centroids)
        # map centroid -> template element via a vertex-set lookup
        key = {tuple(sorted(t)): e for e, t in enumerate(template.triangles)}
        elem = np.array([key[tuple(sorted(v))] for v in verts])
        grads_rhs = eps * micro_grad[:, elem, :]
    return float(np.max(np.linalg.norm(grads_lhs - grads_rhs, axis=-1)))


def two_scale_error(micro_mesh: Mesh, micro_state, macro, macro_state, eps: float):
    """Bulk and layer errors between a resolved and a homogenized state.

    Bulk: the micro restriction shifted by -+eps in x2 is compared with the
    homogenized bulk field in L2 of the shifted strip.  Layer: the unfolded
    micro field is compared with the cell field of the interface node at the
    cell anchor eps*k, in L2(interface x channel).
    Returns dict with per-species arrays err_bulk_plus/minus/err_layer.
    """
    if abs(micro_state.t - macro_state.t) > 1e-9:
        raise TimeMismatch(
            f"micro at t={micro_state.t}, macro at t={macro_state.t}"
        )
    m = micro_state.u.shape[0]
    cache = micro_mesh.extras.setdefault("_ts_cache", {})
    if "masses" not in cache:
        cache["masses"] = {
            "bulk+": fem.assemble_weighted_mass(micro_mesh, 1.0, {"bulk+": 1.0}),
            "bulk-": fem.assemble_weighted_mass(micro_mesh, 1.0, {"bulk-": 1.0}),
        }
    out = {"err_bulk_plus": np.zeros(m), "err_bulk_minus": np.zeros(m),
           "err_layer": np.zeros(m)}
    for sgn, region, key, bmesh, bvals in (
        (+1, "bulk+", "err_bulk_plus", macro.bulk_plus, macro_state.u_plus),
        (-1, "bulk-", "err_bulk_minus", macro.bulk_minus, macro_state.u_minus),
    ):
        shifted = micro_mesh.vertices.copy()
        shifted[:, 1] -= sgn * eps
        M = cache["masses"][region]
        mask = M.diagonal() > 0.0
        for s in range(m):
            macro_vals = fem.evaluate_p1(bmesh, bvals[s], shifted[mask])
            d = np.zeros(micro_mesh.ndof)
            d[mask] = micro_state.u[s][mask] - macro_vals
            out[key][s] = np.sqrt(max(d @ M @ d, 0.0))
    # layer comparison against the nearest interface node to each anchor
    unf_cell = micro_mesh.extras["cell_mesh"]
    if not _matched(micro_mesh, macro.cell_mesh):
        raise LayoutMismatch("macro cell mesh differs from the micro pull-back")
    M_Z = _cell_mass(unf_cell)
    anchors = eps * np.arange(micro_mesh.extras["cell_vertex_ids"].shape[0])
    node_idx = np.array(
        [int(np.argmin(np.abs(macro.nodes - a))) for a in anchors]
    )
    for s in range(m):
        unf = unfold(micro_mesh, micro_state.u[s], eps)
        acc = 0.0
        for k, ni in enumerate(node_idx):
            d = unf.values[k] - macro_state.cells[s][ni]
            acc += eps * (d @ M_Z @ d)
        out["err_layer"][s] = np.sqrt(max(acc, 0.0))
    return out
