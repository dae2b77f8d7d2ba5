"""Homogenized limit solver: bulk domains coupled by local cell problems.

The discrete unknown per species is (bulk+ field, bulk- field, one cell
field on the reference channel per interface node).  The coupling space is
realized by tying every cell dof on the top face to the bulk+ trace dof of
its node, and every bottom-face dof to the bulk- trace dof; assembly builds
block matrices on the full unknown and projects them with the tie
prolongation P, so the constraint residual is structurally zero.

The interface integral is collocated with the trace dofs through trapezoid
weights, one local cell problem per interface node; node dependence enters
only through the limit-transform coefficients evaluated at (t, node).  Cell
blocks carry the Jacobian-weighted mass J0, pulled-back diffusion
J0 F0^{-1} D F0^{-T}, the combined advection J0 (q_tilde0 - b_tilde0) and
the wall load J0 ||F0^{-T} nu|| h.  Time stepping mirrors the resolved
solver: linear transport implicit, reactions explicit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import fem
from .errors import ConfigError, FoldedCell, MeshMismatch
from .fem import Mesh, SparseSystem, interface_vertices
from .problems import ProblemData
from .transform import LimitTransform

_B_MID = fem._B_MID


@dataclass(frozen=True)
class InterfaceQuadrature:
    """Interface nodes (bulk trace vertices) with trapezoid weights."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if abs(self.weights.sum() - (self.nodes[-1] - self.nodes[0])) > 1e-12:
            raise MeshMismatch("trapezoid weights do not sum to the interface length")


def trapezoid_quadrature(nodes: np.ndarray) -> InterfaceQuadrature:
    nodes = np.asarray(nodes, float)
    w = np.zeros_like(nodes)
    w[1:] += 0.5 * np.diff(nodes)
    w[:-1] += 0.5 * np.diff(nodes)
    return InterfaceQuadrature(nodes=nodes, weights=w)


@dataclass
class MacroState:
    """Homogenized state: bulk dof vectors and per-node cell dof vectors."""

    t: float
    u_plus: np.ndarray   # (m, n_plus)
    u_minus: np.ndarray  # (m, n_minus)
    cells: np.ndarray    # (m, n_nodes, n_cell_dofs)
    mass_full: Optional[sp.csr_matrix] = field(default=None, repr=False)


class MacroSolver:
    """Assembly context for the coupled bulk/cell system."""

    def __init__(self, bulk_plus: Mesh, bulk_minus: Mesh, cell_mesh: Mesh,
                 limit: LimitTransform, data: ProblemData, tol: float = 1e-12):
        self.bulk_plus = bulk_plus
        self.bulk_minus = bulk_minus
        self.cell_mesh = cell_mesh
        self.limit = limit
        self.data = data
        self.tol = tol

        self.ip = interface_vertices(bulk_plus)
        self.im = interface_vertices(bulk_minus)
        xs_p = bulk_plus.vertices[self.ip, 0]
        xs_m = bulk_minus.vertices[self.im, 0]
        if len(xs_p) != len(xs_m) or np.max(np.abs(xs_p - xs_m)) > 1e-12:
            raise MeshMismatch("bulk interface node sets do not match")
        self.nodes = xs_p
        self.quad = trapezoid_quadrature(self.nodes)
        self.n_nodes = len(self.nodes)

        grid = cell_mesh.meta.grid
        self.cell_top = np.asarray(grid[:, -1])
        self.cell_bottom = np.asarray(grid[:, 0])
        boundary = set(self.cell_top) | set(self.cell_bottom)
        self.cell_interior = np.array(
            [d for d in range(cell_mesh.ndof) if d not in boundary], dtype=int
        )

        self.n_p = bulk_plus.ndof
        self.n_m = bulk_minus.ndof
        self.nc = cell_mesh.ndof
        self.n_full = self.n_p + self.n_m + self.n_nodes * self.nc
        self._build_prolongation()

        self.M_bp = fem.assemble_weighted_mass(bulk_plus, 1.0, {"bulk+": 1.0})
        self.M_bm = fem.assemble_weighted_mass(bulk_minus, 1.0, {"bulk-": 1.0})
        self.A_bp = [
            fem.assemble_operator(bulk_plus, s.D_plus, s.q_plus,
                                  {"bulk+": 1.0}, {"bulk+": 1.0})
            for s in data.species
        ]
        self.A_bm = [
            fem.assemble_operator(bulk_minus, s.D_minus, s.q_minus,
                                  {"bulk-": 1.0}, {"bulk-": 1.0})
            for s in data.species
        ]
        self._z_quad = cell_mesh.midpoints.reshape(-1, 2)
        nidx = cell_mesh.facet_elements("N")
        self._n_idx = nidx
        npts, nwts, nnrm = cell_mesh.facet_geometry(nidx)
        self._n_pts = npts.reshape(-1, 2)
        self._n_nrm = np.repeat(nnrm, 2, axis=0)
        # interface-adjacent bulk elements per node, for flux recovery
        self._adj_p = self._adjacent(bulk_plus, self.ip, "bulk+")
        self._adj_m = self._adjacent(bulk_minus, self.im, "bulk-")

    @staticmethod
    def _adjacent(mesh, iface_ids, region):
        elems = mesh.region_elements(region)
        tri = mesh.triangles[elems]
        out = []
        for v in iface_ids:
            out.append(elems[np.any(tri == v, axis=1)])
        return out

    def _build_prolongation(self):
        rows, cols = [], []
        n_red_cells = len(self.cell_interior)
        self.n_red = self.n_p + self.n_m + self.n_nodes * n_red_cells
        for d in range(self.n_p):
            rows.append(d)
            cols.append(d)
        for d in range(self.n_m):
            rows.append(self.n_p + d)
            cols.append(self.n_p + d)
        pos = {d: k for k, d in enumerate(self.cell_interior)}
        for i in range(self.n_nodes):
            off = self.n_p + self.n_m + i * self.nc
            red_off = self.n_p + self.n_m + i * n_red_cells
            for d in range(self.nc):
                rows.append(off + d)
                if d in pos:
                    cols.append(red_off + pos[d])
                elif d in set(self.cell_top):
                    cols.append(int(self.ip[i]))
                else:
                    cols.append(self.n_p + int(self.im[i]))
        data = np.ones(len(rows))
        self.P = sp.coo_matrix(
            (data, (rows, cols)), shape=(self.n_full, self.n_red)
        ).tocsr()

    # -- coefficient evaluation -------------------------------------------------

    def _cell_fields(self, t: float, xp: float):
        jd = self.limit.data(t, xp, self._z_quad)
        nt = len(self.cell_mesh.triangles)
        out = {"J": jd.J.reshape(nt, 3), "JD": [], "vel": []}
        for spd in self.data.species:
            Dbar = np.asarray(spd.D_layer(t, xp, self._z_quad), float)
            qbar = np.asarray(spd.q_layer(t, xp, self._z_quad), float)
            Dt = np.einsum("nij,njk,nlk->nil", jd.F_inv, Dbar, jd.F_inv)
            qt = np.einsum("nij,nj->ni", jd.F_inv, qbar)
            out["JD"].append((jd.J[:, None, None] * Dt).reshape(nt, 3, 2, 2))
            out["vel"].append(
                (jd.J[:, None] * (qt - jd.b_tilde)).reshape(nt, 3, 2)
            )
        return out

    def _wall_weight(self, t: float, xp: float):
        jd = self.limit.data(t, xp, self._n_pts)
        cot = np.einsum("nji,nj->ni", jd.F_inv, self._n_nrm)
        return (jd.J * np.linalg.norm(cot, axis=1)).reshape(-1, 2)

    def _cell_blocks(self, t: float):
        """Per-node Jacobian-weighted mass/transport matrices at time t,
        plus the raw coefficient fields (reused by the load assembly)."""
        masses, ops, fields = [], [], []
        for i, xp in enumerate(self.nodes):
            w = self.quad.weights[i]
            cf = self._cell_fields(t, xp)
            fields.append(cf)
            masses.append(
                fem.assemble_weighted_mass(self.cell_mesh, cf["J"], {"cell": w})
            )
            ops.append(
                [
                    fem.assemble_operator(
                        self.cell_mesh, cf["JD"][s], cf["vel"][s],
                        {"cell": w}, {"cell": w},
                    )
                    for s in range(self.data.m)
                ]
            )
        return masses, ops, fields

    # -- state handling ----------------------------------------------------------

    def pack(self, state: MacroState, s: int) -> np.ndarray:
        return np.concatenate(
            [state.u_plus[s], state.u_minus[s], state.cells[s].ravel()]
        )

    def initial_state(self) -> MacroState:
        m = self.data.m
        up = np.empty((m, self.n_p))
        um = np.empty((m, self.n_m))
        cells = np.empty((m, self.n_nodes, self.nc))
        for s, spd in enumerate(self.data.species):
            up[s] = spd.initial.bulk(self.bulk_plus.vertices, +1)
            um[s] = spd.initial.bulk(self.bulk_minus.vertices, -1)
            for i, xp in enumerate(self.nodes):
                cells[s, i] = spd.initial.cell(xp, self.cell_mesh.vertices)
                cells[s, i, self.cell_top] = up[s, self.ip[i]]
                cells[s, i, self.cell_bottom] = um[s, self.im[i]]
        masses, _, _ = self._cell_blocks(0.0)
        M_full = sp.block_diag([self.M_bp, self.M_bm] + masses, format="csr")
        return MacroState(t=0.0, u_plus=up, u_minus=um, cells=cells,
                          mass_full=M_full)

    def assemble(self, t: float, dt: float, state: MacroState):
        """Monolithic reduced systems, one per species, for the step to
        t + dt; right-hand sides carry old Jacobian-weighted masses and the
        explicit reactions/loads evaluated at the given state."""
        t1 = t + dt
        masses, ops, fields = self._cell_blocks(t1)
        M_new = sp.block_diag([self.M_bp, self.M_bm] + masses, format="csr")
        M_old = state.mass_full
        if M_old is None:
            mo, _, _ = self._cell_blocks(t)
            M_old = sp.block_diag([self.M_bp, self.M_bm] + mo, format="csr")

        nsp = self.data.m
        Up_mid = np.einsum(
            "sei,qi->seq",
            state.u_plus[:, self.bulk_plus.triangles], _B_MID,
        )
        Um_mid = np.einsum(
            "sei,qi->seq",
            state.u_minus[:, self.bulk_minus.triangles], _B_MID,
        )
        cell_mid = np.einsum(
            "snei,qi->sneq",
            state.cells[:, :, self.cell_mesh.triangles], _B_MID,
        )
        fac = self.cell_mesh.facets[self._n_idx]
        basis = np.stack(
            [0.5 * (1.0 - fem._GAUSS_1D), 0.5 * (1.0 + fem._GAUSS_1D)], axis=1
        )
        cell_fac = (
            state.cells[:, :, fac[:, 0], None] * basis[None, None, None, :, 0]
            + state.cells[:, :, fac[:, 1], None] * basis[None, None, None, :, 1]
        )  # (m, nodes, nf, 2)

        systems = []
        for s, spd in enumerate(self.data.species):
            A = sp.block_diag(
                [self.A_bp[s], self.A_bm[s]] + [op[s] for op in ops],
                format="csr",
            )
            rhs = (1.0 / dt) * (M_old @ self.pack(state, s))
            fp = spd.f(Up_mid.reshape(nsp, -1)).reshape(Up_mid.shape[1:])
            fm = spd.f(Um_mid.reshape(nsp, -1)).reshape(Um_mid.shape[1:])
            if spd.source_bulk is not None:
                fp = fp + spd.source_bulk(
                    t1, self.bulk_plus.midpoints.reshape(-1, 2)
                ).reshape(fp.shape)
                fm = fm + spd.source_bulk(
                    t1, self.bulk_minus.midpoints.reshape(-1, 2)
                ).reshape(fm.shape)
            rhs[: self.n_p] += fem.assemble_load(self.bulk_plus, fp, {"bulk+": 1.0})
            rhs[self.n_p : self.n_p + self.n_m] += fem.assemble_load(
                self.bulk_minus, fm, {"bulk-": 1.0}
            )
            need_h = spd.h.name != "zero" or spd.h.lipschitz > 0.0
            for i, xp in enumerate(self.nodes):
                off = self.n_p + self.n_m + i * self.nc
                w = self.quad.weights[i]
                g_vals = spd.g(
                    cell_mid[:, i].reshape(nsp, -1)
                ).reshape(cell_mid.shape[2:])
                rhs[off : off + self.nc] += fem.assemble_load(
                    self.cell_mesh, fields[i]["J"] * g_vals, {"cell": w}
                )
                if need_h:
                    h_vals = spd.h(
                        cell_fac[:, i].reshape(nsp, -1)
                    ).reshape(cell_fac.shape[2:])
                    rhs[off : off + self.nc] -= w * fem.assemble_boundary(
                        self.cell_mesh, "N", self._wall_weight(t1, xp),
                        mode="load", load_fn=h_vals,
                    )
            S = ((1.0 / dt) * M_new + A).tocsr()
            S_red = (self.P.T @ S @ self.P).tocsr()
            rhs_red = self.P.T @ rhs
            systems.append(SparseSystem(S_red, rhs_red))
        return systems, M_new

    def step(self, state: MacroState, dt: float) -> MacroState:
        systems, M_new = self.assemble(state.t, dt, state)
        m = self.data.m
        up = np.empty_like(state.u_plus)
        um = np.empty_like(state.u_minus)
        cells = np.empty_like(state.cells)
        for s in range(m):
            x_red = fem.solve_linear(systems[s], tol=self.tol)
            full = self.P @ x_red
            up[s] = full[: self.n_p]
            um[s] = full[self.n_p : self.n_p + self.n_m]
            cells[s] = full[self.n_p + self.n_m :].reshape(self.n_nodes, self.nc)
        return MacroState(t=state.t + dt, u_plus=up, u_minus=um, cells=cells,
                          mass_full=M_new)

    def solve(self, dt: float, T: float):
        n_steps = int(round(T / dt)) if T > 0 else 0
        if T > 0 and abs(n_steps * dt - T) > 1e-9:
            raise ConfigError("dt", f"dt = {dt} does not divide T = {T}")
        state = self.initial_state()
        traj = [state]
        diags = [self._diag_rows(state)]
        for _ in range(n_steps):
            state = self.step(state, dt)
            traj.append(state)
            diags.append(self._diag_rows(state))
        return traj, [row for rows in diags for row in rows]

    def total_mass(self, state: MacroState) -> np.ndarray:
        ones = np.ones(self.n_full)
        w = state.mass_full.T @ ones
        return np.array([self.pack(state, s) @ w for s in range(self.data.m)])

    def _diag_rows(self, state):
        masses = self.total_mass(state)
        return [
            {"t": state.t, "species": s, "mass": float(masses[s])}
            for s in range(self.data.m)
        ]

    def coupling_residual(self, state: MacroState) -> float:
        """Max mismatch between tied cell dofs and bulk traces."""
        worst = 0.0
        for s in range(self.data.m):
            for i in range(self.n_nodes):
                worst = max(
                    worst,
                    np.max(np.abs(state.cells[s, i, self.cell_top]
                                  - state.u_plus[s, self.ip[i]])),
                    np.max(np.abs(state.cells[s, i, self.cell_bottom]
                                  - state.u_minus[s, self.im[i]])),
                )
        return worst

    # -- post-processing ----------------------------------------------------------

    def flux_jump_residual(self, state: MacroState):
        """Transmission residuals per node and species.

        Compares the recovered bulk total flux (D grad u - u q) . e2 on each
        side with the face-integrated cell flux int_{S+-} (Dt grad_z u -
        u qt) . e2, and their difference with the summed cell fluxes (the
        flux-jump identity).  Returns rows of dicts.
        """
        t = state.t
        rows = []
        for s, spd in enumerate(self.data.species):
            bulk_flux = {}
            for sign, mesh, vals, adj, D, q in (
                (+1, self.bulk_plus, state.u_plus[s], self._adj_p,
                 spd.D_plus, spd.q_plus),
                (-1, self.bulk_minus, state.u_minus[s], self._adj_m,
                 spd.D_minus, spd.q_minus),
            ):
                per_node = np.empty(self.n_nodes)
                for i in range(self.n_nodes):
                    elems = adj[i]
                    tri = mesh.triangles[elems]
                    g = np.einsum("ei,eid->ed", vals[tri], mesh.grads[elems])
                    umean = vals[tri].mean(axis=1)
                    flux = g @ D.T - umean[:, None] * q[None, :]
                    per_node[i] = flux[:, 1].mean()
                bulk_flux[sign] = per_node
            cell_flux = {+1: np.empty(self.n_nodes), -1: np.empty(self.n_nodes)}
            for face_sign, tag in ((+1, "S+"), (-1, "S-")):
                idx = self.cell_mesh.facet_elements(tag)
                pts, wts, _ = self.cell_mesh.facet_geometry(idx)
                owners = self.cell_mesh.facet_owner[idx]
                for i, xp in enumerate(self.nodes):
                    jd = self.limit.data(t, xp, pts.reshape(-1, 2))
                    Dbar = np.asarray(spd.D_layer(t, xp, pts.reshape(-1, 2)))
                    qbar = np.asarray(spd.q_layer(t, xp, pts.reshape(-1, 2)))
                    Dt = np.einsum("nij,njk,nlk->nil", jd.F_inv, Dbar, jd.F_inv)
                    qt = np.einsum("nij,nj->ni", jd.F_inv, qbar)
                    u = state.cells[s, i]
                    g = np.einsum(
                        "ei,eid->ed",
                        u[self.cell_mesh.triangles[owners]],
                        self.cell_mesh.grads[owners],
                    )
                    g2 = np.repeat(g, 2, axis=0)
                    fac = self.cell_mesh.facets[idx]
                    basis = np.stack(
                        [0.5 * (1.0 - fem._GAUSS_1D),
                         0.5 * (1.0 + fem._GAUSS_1D)], axis=1,
                    )
                    uq = (
                        u[fac[:, 0], None] * basis[None, :, 0]
                        + u[fac[:, 1], None] * basis[None, :, 1]
                    ).ravel()
                    flux = (
                        np.einsum("nij,nj->ni", Dt, g2)
                        - uq[:, None] * qt
                    )[:, 1]
                    cell_flux[face_sign][i] = float(
                        (flux.reshape(-1, 2) * wts).sum()
                    )
            r_plus = np.abs(bulk_flux[+1] - cell_flux[+1])
            r_minus = np.abs(bulk_flux[-1] - cell_flux[-1])
            jump = np.abs(
                (bulk_flux[+1] - bulk_flux[-1])
                - (cell_flux[+1] - cell_flux[-1])
            )
            for i in range(self.n_nodes):
                rows.append(
                    {
                        "t": t,
                        "node": i,
                        "x": float(self.nodes[i]),
                        "species": s,
                        "flux_plus": float(bulk_flux[+1][i]),
                        "flux_minus": float(bulk_flux[-1][i]),
                        "cell_flux_plus": float(cell_flux[+1][i]),
                        "cell_flux_minus": float(cell_flux[-1][i]),
                        "jump": float(jump[i]),
                        "residual_plus": float(r_plus[i]),
                        "residual_minus": float(r_minus[i]),
                    }
                )
        return rows

    def push_forward(self, state: MacroState):
        """Deformed-cell view: vertices mapped by the limit transform.

        Returns one record per interface node with the mapped vertex array,
        carried dof values and the deformed area; raises FoldedCell when a
        mapped triangle degenerates.
        """
        out = []
        tri = self.cell_mesh.triangles
        for i, xp in enumerate(self.nodes):
            mapped = self.limit.psi0(state.t, xp, self.cell_mesh.vertices)
            p = mapped[tri]
            areas = 0.5 * (
                (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
            )
            if np.any(areas <= 0.0):
                raise FoldedCell(
                    f"node {i} (x = {xp:.4f}): cell folded at t = {state.t}"
                )
            out.append(
                {
                    "node": i,
                    "x": float(xp),
                    "vertices": mapped,
                    "values": state.cells[:, i],
                    "area": float(areas.sum()),
                }
            )
        return out


# -- module-level wrappers -----------------------------------------------------

def assemble_macro(bulk_plus, bulk_minus, cell_mesh, limit, data, t, dt, state):
    """One reduced monolithic system per species for the step t -> t+dt."""
    solver = MacroSolver(bulk_plus, bulk_minus, cell_mesh, limit, data)
    systems, _ = solver.assemble(t, dt, state)
    return systems


def solve_macro(bulk_plus, bulk_minus, cell_mesh, limit, data, dt, T):
    solver = MacroSolver(bulk_plus, bulk_minus, cell_mesh, limit, data)
    return solver.solve(dt, T)
