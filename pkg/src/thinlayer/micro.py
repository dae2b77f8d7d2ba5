"""Semi-implicit time stepper for the transformed layer problem.

One step per species solves

    (1/dt) M[J^{k+1}] u^{k+1} + A[J^{k+1}] u^{k+1}
        = (1/dt) M[J^k] u^k + loads(f(u^k), g(u^k), h(u^k), sources),

where M carries region scales (1, 1/eps, 1) with the Jacobian weight in the
layer, the diffusion block carries (1, eps, 1) with pulled-back tensors
J F^{-1} D F^{-T}, the advection block carries the combined layer velocity
J(q_tilde - F^{-1} d_t psi) (the second term is the 1/eps-scaled wall-motion
flux), and the nonlinearities are explicit.  Diffusion, advection and the
wall-motion term are implicit, so the linear part is unconditionally stable;
testing with the constant function shows the step conserves the
Jacobian-weighted total mass up to the linear-solver residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import fem
from .errors import ConfigError, DataMismatch
from .fem import Mesh, SparseSystem
from .problems import ProblemData
from .transform import TransformSpec, unfold_coords

_B_MID = fem._B_MID


@dataclass
class MicroState:
    """Discrete layer-problem state at one time."""

    t: float
    u: np.ndarray                 # (m, ndof)
    jw: np.ndarray                # layer-quadrature Jacobians at time t
    layer_mass: Optional[sp.csr_matrix] = field(default=None, repr=False)


class MicroSolver:
    """Cached assembly context for one (mesh, data, spec, eps) combination."""

    def __init__(self, mesh: Mesh, data: ProblemData, spec: TransformSpec,
                 eps: float, tol: float = 1e-12):
        if abs(mesh.extras.get("eps", -1.0) - eps) > 1e-12:
            raise DataMismatch(
                f"mesh was tiled for eps = {mesh.extras.get('eps')}, not {eps}"
            )
        self.mesh = mesh
        self.data = data
        self.spec = spec
        self.eps = eps
        self.tol = tol

        self.ch = mesh.region_elements("channel")
        self.bp = mesh.region_elements("bulk+")
        self.bm = mesh.region_elements("bulk-")
        pts = mesh.midpoints[self.ch].reshape(-1, 2)
        self._ks, self._zs = unfold_coords(eps, pts)
        order = np.argsort(self._ks, kind="stable")
        if not np.array_equal(order, np.arange(len(order))):
            raise DataMismatch("channel elements are not grouped by cell")
        self._cell_slices = [
            np.flatnonzero(self._ks == k) for k in range(int(round(1.0 / eps)))
        ]

        nidx = mesh.facet_elements("N")
        self._n_idx = nidx
        self._n_pts, self._n_wts, self._n_nrm = mesh.facet_geometry(nidx)
        flatn = self._n_pts.reshape(-1, 2)
        self._n_ks, self._n_zs = unfold_coords(eps, flatn)

        # time-independent blocks
        self.M_bulk = fem.assemble_weighted_mass(
            mesh, 1.0, {"bulk+": 1.0, "bulk-": 1.0}
        )
        self.A_bulk = []
        for spd in data.species:
            A = fem.assemble_operator(
                mesh, spd.D_plus, spd.q_plus, {"bulk+": 1.0}, {"bulk+": 1.0}
            ) + fem.assemble_operator(
                mesh, spd.D_minus, spd.q_minus, {"bulk-": 1.0}, {"bulk-": 1.0}
            )
            self.A_bulk.append(A.tocsr())
        # norm/diagnostic blocks (unweighted)
        self.M_ch = fem.assemble_weighted_mass(mesh, 1.0, {"channel": 1.0})
        eye = np.eye(2)
        self.K_bulk = fem.assemble_operator(
            mesh, eye, None, {"bulk+": 1.0, "bulk-": 1.0}, {}
        )
        self.K_ch = fem.assemble_operator(mesh, eye, None, {"channel": 1.0}, {})

    # -- coefficient sampling -------------------------------------------------

    def _layer_fields(self, t: float):
        """Jacobian and pulled-back coefficients at the channel quadrature
        points, grouped per species, at time t."""
        n = len(self._zs)
        J = np.empty(n)
        F_inv = np.empty((n, 2, 2))
        wall_vel = np.empty((n, 2))  # F^{-1} d_t psi, the 1/eps-scaled term
        nsp = self.data.m
        JD = [np.empty((n, 2, 2)) for _ in range(nsp)]
        vel = [np.empty((n, 2)) for _ in range(nsp)]
        eps = self.eps
        for k, idx in enumerate(self._cell_slices):
            if len(idx) == 0:
                continue
            xp = eps * k
            z = self._zs[idx]
            F = self.spec.grad(t, xp, z)
            det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
            Fi = np.empty_like(F)
            Fi[:, 0, 0] = F[:, 1, 1]
            Fi[:, 1, 1] = F[:, 0, 0]
            Fi[:, 0, 1] = -F[:, 0, 1]
            Fi[:, 1, 0] = -F[:, 1, 0]
            Fi /= det[:, None, None]
            dpsi = self.spec.dt(t, xp, z)
            J[idx] = det
            F_inv[idx] = Fi
            wall_vel[idx] = np.einsum("nij,nj->ni", Fi, dpsi)
            for s, spd in enumerate(self.data.species):
                Dbar = np.asarray(spd.D_layer(t, xp, z), float)
                qbar = np.asarray(spd.q_layer(t, xp, z), float)
                Dt = np.einsum("nij,njk,nlk->nil", Fi, Dbar, Fi)
                qt = np.einsum("nij,nj->ni", Fi, qbar)
                JD[s][idx] = det[:, None, None] * Dt
                vel[s][idx] = det[:, None] * (qt - wall_vel[idx])
        nt = len(self.ch)
        return {
            "J": J.reshape(nt, 3),
            "JD": [a.reshape(nt, 3, 2, 2) for a in JD],
            "vel": [a.reshape(nt, 3, 2) for a in vel],
        }

    def _wall_weight(self, t: float):
        """J * ||F^{-T} nu|| at the wall quadrature points."""
        n = len(self._n_zs)
        out = np.empty(n)
        nrm = np.repeat(self._n_nrm, 2, axis=0)
        for k in np.unique(self._n_ks):
            sel = self._n_ks == k
            F = self.spec.grad(t, self.eps * k, self._n_zs[sel])
            det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
            Fi = np.empty_like(F)
            Fi[:, 0, 0] = F[:, 1, 1]
            Fi[:, 1, 1] = F[:, 0, 0]
            Fi[:, 0, 1] = -F[:, 0, 1]
            Fi[:, 1, 0] = -F[:, 1, 0]
            Fi /= det[:, None, None]
            cot = np.einsum("nji,nj->ni", Fi, nrm[sel])  # F^{-T} nu
            out[sel] = det * np.linalg.norm(cot, axis=1)
        return out.reshape(-1, 2)

    # -- state operations -----------------------------------------------------

    def initial_state(self) -> MicroState:
        u = np.empty((self.data.m, self.mesh.ndof))
        for s, spd in enumerate(self.data.species):
            u[s] = spd.initial.micro_factory(self.eps)(self.mesh.vertices)
        lay = self._layer_fields(0.0)
        M_l = fem.assemble_weighted_mass(
            self.mesh, lay["J"], {"channel": 1.0 / self.eps}
        )
        return MicroState(t=0.0, u=u, jw=lay["J"], layer_mass=M_l)

    def _midvals(self, u, elems):
        return np.einsum("sei,qi->seq", u[:, self.mesh.triangles[elems]], _B_MID)

    def step(self, state: MicroState, dt: float) -> MicroState:
        t1 = state.t + dt
        if t1 > self.spec.horizon + 1e-9:
            raise ConfigError("dt", f"step past the transform horizon {self.spec.horizon}")
        eps = self.eps
        lay = self._layer_fields(t1)
        M_new_l = fem.assemble_weighted_mass(
            self.mesh, lay["J"], {"channel": 1.0 / eps}
        )
        M_old = self.M_bulk + (
            state.layer_mass
            if state.layer_mass is not None
            else fem.assemble_weighted_mass(self.mesh, state.jw, {"channel": 1.0 / eps})
        )
        M_new = self.M_bulk + M_new_l

        Ubp = self._midvals(state.u, self.bp)
        Ubm = self._midvals(state.u, self.bm)
        Uch = self._midvals(state.u, self.ch)
        nsp = self.data.m
        # P1 values at the 2 Gauss points per wall facet (fem convention)
        basis = np.stack(
            [0.5 * (1.0 - fem._GAUSS_1D), 0.5 * (1.0 + fem._GAUSS_1D)], axis=1
        )
        fac = self.mesh.facets[self._n_idx]
        Ufac = (
            state.u[:, fac[:, 0], None] * basis[None, None, :, 0]
            + state.u[:, fac[:, 1], None] * basis[None, None, :, 1]
        )
        wall_w = self._wall_weight(t1)

        u_new = np.empty_like(state.u)
        for s, spd in enumerate(self.data.species):
            A = self.A_bulk[s] + fem.assemble_operator(
                self.mesh, lay["JD"][s], lay["vel"][s],
                {"channel": eps}, {"channel": 1.0},
            )
            rhs = (1.0 / dt) * (M_old @ state.u[s])
            fb_p = spd.f(Ubp.reshape(nsp, -1)).reshape(Ubp.shape[1:])
            fb_m = spd.f(Ubm.reshape(nsp, -1)).reshape(Ubm.shape[1:])
            g_ch = spd.g(Uch.reshape(nsp, -1)).reshape(Uch.shape[1:])
            if spd.source_bulk is not None:
                fb_p = fb_p + spd.source_bulk(
                    t1, self.mesh.midpoints[self.bp].reshape(-1, 2)
                ).reshape(fb_p.shape)
                fb_m = fb_m + spd.source_bulk(
                    t1, self.mesh.midpoints[self.bm].reshape(-1, 2)
                ).reshape(fb_m.shape)
            if spd.source_layer is not None:
                g_ch = g_ch + spd.source_layer(
                    t1, self.mesh.midpoints[self.ch].reshape(-1, 2)
                ).reshape(g_ch.shape)
            rhs += fem.assemble_load(self.mesh, fb_p, {"bulk+": 1.0})
            rhs += fem.assemble_load(self.mesh, fb_m, {"bulk-": 1.0})
            rhs += fem.assemble_load(
                self.mesh, lay["J"] * g_ch, {"channel": 1.0 / eps}
            )
            if spd.h.lipschitz > 0.0 or spd.h.name != "zero":
                h_vals = spd.h(Ufac.reshape(nsp, -1)).reshape(Ufac.shape[1:])
                rhs -= fem.assemble_boundary(
                    self.mesh, "N", wall_w, mode="load", load_fn=h_vals
                )
            S = ((1.0 / dt) * M_new + A).tocsr()
            u_new[s] = fem.solve_linear(SparseSystem(S, rhs), tol=self.tol)
        return MicroState(t=t1, u=u_new, jw=lay["J"], layer_mass=M_new_l)

    # -- diagnostics ----------------------------------------------------------

    def scaled_norms(self, state: MicroState):
        """Per species (layer-weighted L2 norm, layer-weighted H1 norm)."""
        out = []
        eps = self.eps
        for s in range(self.data.m):
            u = state.u[s]
            l2 = u @ self.M_bulk @ u + (1.0 / eps) * (u @ self.M_ch @ u)
            h1 = l2 + u @ self.K_bulk @ u + eps * (u @ self.K_ch @ u)
            out.append((np.sqrt(max(l2, 0.0)), np.sqrt(max(h1, 0.0))))
        return out

    def total_mass(self, state: MicroState):
        """Jacobian-weighted total mass per species (physical mass)."""
        M_l = (
            state.layer_mass
            if state.layer_mass is not None
            else fem.assemble_weighted_mass(
                self.mesh, state.jw, {"channel": 1.0 / self.eps}
            )
        )
        ones = np.ones(self.mesh.ndof)
        w = (self.M_bulk + M_l).T @ ones
        return state.u @ w

    def solve(self, dt: float, T: float, record_every: int = 1):
        """Run from t=0 to T; returns (trajectory, diagnostics rows)."""
        n_steps = int(round(T / dt)) if T > 0 else 0
        if T > 0 and abs(n_steps * dt - T) > 1e-9:
            raise ConfigError("dt", f"dt = {dt} does not divide T = {T}")
        state = self.initial_state()
        traj = [state]
        diags = [self._diag_rows(state)]
        for k in range(n_steps):
            state = self.step(state, dt)
            if (k + 1) % record_every == 0 or k == n_steps - 1:
                traj.append(state)
                diags.append(self._diag_rows(state))
        return traj, [row for rows in diags for row in rows]

    def _diag_rows(self, state):
        masses = self.total_mass(state)
        norms = self.scaled_norms(state)
        return [
            {
                "t": state.t,
                "species": s,
                "mass": float(masses[s]),
                "norm_L": norms[s][0],
                "norm_H": norms[s][1],
            }
            for s in range(self.data.m)
        ]


# -- module-level operations (thin wrappers with a per-mesh cache) -------------

def _solver_for(mesh, data, spec, eps, tol=1e-12) -> MicroSolver:
    cache = mesh.extras.setdefault("_micro_solvers", {})
    key = (id(data), id(spec), eps, tol)
    if key not in cache:
        cache[key] = MicroSolver(mesh, data, spec, eps, tol)
    return cache[key]


def init_micro(mesh, data, spec, eps) -> MicroState:
    return _solver_for(mesh, data, spec, eps).initial_state()


def step_micro(state, dt, data, spec, eps, mesh) -> MicroState:
    return _solver_for(mesh, data, spec, eps).step(state, dt)


def solve_micro(mesh, data, spec, eps, dt, T):
    return _solver_for(mesh, data, spec, eps).solve(dt, T)


def scaled_norms(mesh, data, spec, eps, state):
    return _solver_for(mesh, data, spec, eps).scaled_norms(state)


def total_mass(mesh, data, spec, eps, state):
    return _solver_for(mesh, data, spec, eps).total_mass(state)


def verify_trace_inequality(mesh, eps, theta_list, sample_fields=None, seed=0):
    """Smallest admissible constant of the weighted wall-trace inequality.

    For each theta returns max over sample fields v of
    int_N v^2 / (theta*eps*int |grad v|^2 + 1/(theta*eps) * int v^2), layer
    integrals over the channel region.  Null fields are skipped.
    """
    B = fem.assemble_boundary(mesh, "N", 1.0, mode="mass")
    M = fem.assemble_weighted_mass(mesh, 1.0, {"channel": 1.0})
    K = fem.assemble_operator(mesh, np.eye(2), None, {"channel": 1.0}, {})
    if sample_fields is None:
        rng = np.random.default_rng(seed)
        v = mesh.vertices
        sample_fields = [np.ones(mesh.ndof), v[:, 0].copy(), v[:, 1].copy()]
        sample_fields += [rng.standard_normal(mesh.ndof) for _ in range(32)]
    out = {}
    for theta in theta_list:
        best = 0.0
        for vfield in sample_fields:
            denom = theta * eps * (vfield @ K @ vfield) + (
                vfield @ M @ vfield
            ) / (theta * eps)
            num = vfield @ B @ vfield
            if denom <= 1e-300:
                continue  # null field on the layer: 0/0 excluded
            best = max(best, num / denom)
        out[theta] = best
    return out
