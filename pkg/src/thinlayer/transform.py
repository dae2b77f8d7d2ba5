"""Prescribed channel evolution and its pulled-back coefficients.

The layer geometry evolves through a per-cell map ``psi(t, xp, z)`` acting on
cell coordinates, equal to the identity near the cell boundary.  The full
layer transformation is assembled cell by cell,

    Psi_eps(t, x) = eps*(k, 0) + eps * psi(t, eps*k, x/eps - (k, 0)),

with anchor ``k = floor(x1/eps)``; the macroscopic argument ``xp = eps*k``
lets neighbouring cells deform differently.  Everything needed by the solvers
derives from psi: the spatial Jacobian ``F = D_z psi`` (the eps factors of the
chain rule cancel), its determinant J, and the pulled-back wall velocity
``b = F^{-1} d_t Psi_eps`` which is O(eps).  The scale-free limit of the
construction keeps psi itself: ``psi0(t, xp, z) = (xp, 0) + psi(t, xp, z)``
with F0 = D_z psi, J0 = det F0, b0 = F0^{-1} d_t psi.

Specs must provide analytic gradients and time derivatives; finite
differences appear only in cross-checks and audits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NotSPD, OutOfDomain, SingularJacobian, TimeOutOfRange
from .geometry import ChannelSpec

_FD_STEP = 1e-5
_DERIV_TOL = 1e-6


@dataclass(frozen=True)
class TransformSpec:
    """Per-cell evolution map with analytic derivatives.

    displacement_fn(t, xp, z) -> psi(t, xp, z), z of shape (n, 2);
    grad_fn -> D_z psi of shape (n, 2, 2); dt_fn -> d_t psi of shape (n, 2).
    identity_band is the margin delta with psi = id on B_delta(dZ); horizon
    the final time T; det_floor the admissible Jacobian minimum c0.
    """

    name: str
    displacement_fn: Callable
    grad_fn: Callable
    dt_fn: Callable
    identity_band: float
    horizon: float
    det_floor: float = 0.1
    params: dict = field(default_factory=dict)

    def psi(self, t, xp, z):
        return self.displacement_fn(t, xp, np.atleast_2d(np.asarray(z, float)))

    def grad(self, t, xp, z):
        return self.grad_fn(t, xp, np.atleast_2d(np.asarray(z, float)))

    def dt(self, t, xp, z):
        return self.dt_fn(t, xp, np.atleast_2d(np.asarray(z, float)))

    def validate(self, n_samples: int = 9, rng=None):
        """Sample the defining conditions of an admissible evolution.

        Checks (a) identity on the band around the cell boundary, (b) the
        determinant floor, (c) analytic gradients and time derivatives
        against central differences with step 1e-5 to 1e-6.
        """
        rng = rng or np.random.default_rng(0)
        z1 = np.linspace(0.0, 1.0, n_samples)
        z2 = np.linspace(-1.0, 1.0, n_samples)
        zz = np.array([(a, b) for a in z1 for b in z2])
        times = np.linspace(0.0, self.horizon, 5)
        xps = np.linspace(0.0, 1.0, 5)
        for t in times:
            for xp in xps:
                psi = self.psi(t, xp, zz)
                F = self.grad(t, xp, zz)
                det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
                if np.any(det < self.det_floor):
                    raise SingularJacobian(
                        f"det D_z psi = {det.min():.4f} below floor "
                        f"{self.det_floor} at t={t}, xp={xp}"
                    )
                d_edge = np.minimum.reduce(
                    [zz[:, 0], 1.0 - zz[:, 0], zz[:, 1] + 1.0, 1.0 - zz[:, 1]]
                )
                band = d_edge < self.identity_band
                if np.any(np.abs(psi[band] - zz[band]) > 1e-13):
                    raise SingularJacobian(
                        "psi is not the identity on the boundary band"
                    )
                _check_derivatives(self, t, xp, zz)
        return True


def _check_derivatives(spec, t, xp, zz):
    h = _FD_STEP
    F = spec.grad(t, xp, zz)
    for axis in range(2):
        dz = np.zeros(2)
        dz[axis] = h
        fd = (spec.psi(t, xp, zz + dz) - spec.psi(t, xp, zz - dz)) / (2 * h)
        if np.max(np.abs(fd - F[:, :, axis])) > _DERIV_TOL:
            raise SingularJacobian(
                f"analytic gradient deviates from finite differences "
                f"(axis {axis}, t={t})"
            )
    t0 = min(max(t, h), spec.horizon - h)
    fd_t = (spec.psi(t0 + h, xp, zz) - spec.psi(t0 - h, xp, zz)) / (2 * h)
    if np.max(np.abs(fd_t - spec.dt(t0, xp, zz))) > _DERIV_TOL:
        raise SingularJacobian("analytic d_t psi deviates from finite differences")


@dataclass
class JacobianData:
    """Batched transformation data at evaluation points.

    F: (n,2,2) spatial Jacobian, F_inv its inverse, J: (n,) determinant,
    psi_dot: (n,2) boundary velocity of the eps-scaled map (O(eps)),
    b_tilde = F^{-1} psi_dot.
    """

    F: np.ndarray
    F_inv: np.ndarray
    J: np.ndarray
    psi_dot: np.ndarray
    b_tilde: np.ndarray


def _invert_2x2(F):
    det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    inv = np.empty_like(F)
    inv[:, 0, 0] = F[:, 1, 1]
    inv[:, 1, 1] = F[:, 0, 0]
    inv[:, 0, 1] = -F[:, 0, 1]
    inv[:, 1, 0] = -F[:, 1, 0]
    return inv / det[:, None, None], det


def unfold_coords(eps: float, x):
    """Split layer points into cell anchors eps*k and cell coordinates z."""
    x = np.atleast_2d(np.asarray(x, float))
    n_cells = int(round(1.0 / eps))
    k = np.clip(np.floor(x[:, 0] / eps).astype(int), 0, n_cells - 1)
    z = np.empty_like(x)
    z[:, 0] = x[:, 0] / eps - k
    z[:, 1] = x[:, 1] / eps
    return k, z


def eval_psi_eps(spec: TransformSpec, eps: float, t: float, x) -> np.ndarray:
    """Evaluate the assembled layer transformation at physical points."""
    if not 0.0 <= t <= spec.horizon + 1e-12:
        raise TimeOutOfRange(f"t = {t} outside [0, {spec.horizon}]")
    x = np.atleast_2d(np.asarray(x, float))
    if np.any(x[:, 0] < -1e-12) or np.any(x[:, 0] > 1.0 + 1e-12):
        raise OutOfDomain("point outside the layer in x1")
    if np.any(np.abs(x[:, 1]) > eps + 1e-12):
        raise OutOfDomain("point outside the layer band |x2| <= eps")
    k, z = unfold_coords(eps, x)
    out = np.empty_like(x)
    # anchors differ per point; group by cell to keep callbacks simple
    for kk in np.unique(k):
        sel = k == kk
        psi = spec.psi(t, eps * kk, z[sel])
        out[sel, 0] = eps * (kk + psi[:, 0])
        out[sel, 1] = eps * psi[:, 1]
    return out


def jacobian_data(spec: TransformSpec, eps: float, t: float, points) -> JacobianData:
    """Transformation data of the eps-scaled map at layer points.

    By the chain rule the eps factors cancel in F, so F and J equal the
    cell-frame quantities at the unfolded coordinates, while the velocity
    d_t Psi_eps = eps * d_t psi stays O(eps).
    """
    pts = np.atleast_2d(np.asarray(points, float))
    k, z = unfold_coords(eps, pts)
    F = np.empty((len(pts), 2, 2))
    psi_dot = np.empty((len(pts), 2))
    for kk in np.unique(k):
        sel = k == kk
        F[sel] = spec.grad(t, eps * kk, z[sel])
        psi_dot[sel] = eps * spec.dt(t, eps * kk, z[sel])
    F_inv, J = _invert_2x2(F)
    if np.any(J < spec.det_floor):
        raise SingularJacobian(
            f"J = {J.min():.4f} below floor {spec.det_floor} at t = {t}"
        )
    b_tilde = np.einsum("nij,nj->ni", F_inv, psi_dot)
    return JacobianData(F=F, F_inv=F_inv, J=J, psi_dot=psi_dot, b_tilde=b_tilde)


def cell_jacobian_data(limit: "LimitTransform", t: float, xp: float, z) -> JacobianData:
    """Scale-free transformation data on the reference channel.

    Same layout as jacobian_data but for the limit map at a fixed macro
    position: psi_dot = d_t psi is O(1) here and b_tilde = F0^{-1} d_t psi.
    """
    z = np.atleast_2d(np.asarray(z, float))
    F = limit.spec.grad(t, xp, z)
    psi_dot = limit.spec.dt(t, xp, z)
    F_inv, J = _invert_2x2(F)
    if np.any(J < limit.spec.det_floor):
        raise SingularJacobian(
            f"J0 = {J.min():.4f} below floor {limit.spec.det_floor} at t = {t}"
        )
    b_tilde = np.einsum("nij,nj->ni", F_inv, psi_dot)
    return JacobianData(F=F, F_inv=F_inv, J=J, psi_dot=psi_dot, b_tilde=b_tilde)


def transformed_coefficients(D, q, jd: JacobianData):
    """Pull back diffusion and advection data: F^{-1} D F^{-T}, F^{-1} q.

    D may be a single SPD 2x2 matrix or a batch (n,2,2); likewise q.  The
    result is batched over the evaluation points of jd.
    """
    Fi = jd.F_inv
    D = np.asarray(D, float)
    if D.ndim == 2:
        D = np.broadcast_to(D, (len(Fi), 2, 2))
    if np.max(np.abs(D - np.swapaxes(D, 1, 2))) > 1e-12:
        raise NotSPD("diffusion tensor is not symmetric")
    tr = D[:, 0, 0] + D[:, 1, 1]
    det = D[:, 0, 0] * D[:, 1, 1] - D[:, 0, 1] * D[:, 1, 0]
    if np.any(det <= 0) or np.any(tr <= 0):
        raise NotSPD("diffusion tensor is not positive definite")
    D_t = np.einsum("nij,njk,nlk->nil", Fi, D, Fi)
    q = np.asarray(q, float)
    if q.ndim == 1:
        q = np.broadcast_to(q, (len(Fi), 2))
    q_t = np.einsum("nij,nj->ni", Fi, q)
    return D_t, q_t


@dataclass(frozen=True)
class LimitTransform:
    """Scale-free limit of the per-cell evolutions.

    psi0(t, xp, z) = (xp, 0) + psi(t, xp, z) positions the deformed cell on
    the interface; all coefficient evaluations use the cell frame psi.
    """

    spec: TransformSpec

    def psi0(self, t, xp, z):
        z = np.atleast_2d(np.asarray(z, float))
        out = self.spec.psi(t, xp, z).copy()
        out[:, 0] += xp
        return out

    def data(self, t, xp, z) -> JacobianData:
        return cell_jacobian_data(self, t, xp, z)


def limit_transform(spec: TransformSpec, n_trace_samples: int = 64) -> LimitTransform:
    """Build the limit transform and verify J0 = 1 on the channel faces."""
    lim = LimitTransform(spec=spec)
    z1 = np.linspace(0.0, 1.0, n_trace_samples)
    for z2 in (-1.0, 1.0):
        z = np.column_stack([z1, np.full_like(z1, z2)])
        for t in np.linspace(0.0, spec.horizon, 5):
            for xp in (0.0, 0.37, 1.0):
                jd = cell_jacobian_data(lim, t, xp, z)
                if np.max(np.abs(jd.J - 1.0)) > 1e-12:
                    raise SingularJacobian(
                        "J0 differs from 1 on the top/bottom faces"
                    )
    return lim


# -- assumption audit ---------------------------------------------------------

@dataclass
class AssumptionReport:
    """Sampled suprema of the uniform-evolution requirements.

    Quantities are recorded per eps; 'flags' collects violations of the
    configured ceilings (the audit never raises).  The time-derivative bound
    on J is reported through the stronger pointwise supremum of |d_t J|, not
    through a dual norm, and is labelled accordingly.
    """

    eps_list: list
    sup_psi_dev: dict      # sup (1/eps) |Psi_eps - id|
    sup_psi_dot: dict      # sup (1/eps) |d_t Psi_eps|
    sup_F: dict            # sup ||F|| (2-norm)
    J_bounds: dict         # (min J, max J)
    sup_dtJ_pointwise: dict
    shift_ratios: dict     # l' -> sup ||delta_{l',eps} F|| / |l' eps|
    flags: list

    def summary_rows(self):
        rows = []
        for eps in self.eps_list:
            rows.append(
                {
                    "eps": eps,
                    "sup_psi_dev": self.sup_psi_dev[eps],
                    "sup_psi_dot": self.sup_psi_dot[eps],
                    "sup_F": self.sup_F[eps],
                    "J_min": self.J_bounds[eps][0],
                    "J_max": self.J_bounds[eps][1],
                    "sup_dtJ_pointwise": self.sup_dtJ_pointwise[eps],
                    "shift_ratio_1": self.shift_ratios[eps].get(1, 0.0),
                    "shift_ratio_2": self.shift_ratios[eps].get(2, 0.0),
                }
            )
        return rows


def check_assumptions(
    spec: TransformSpec,
    eps_list,
    sample_density: int = 8,
    ceilings: dict | None = None,
) -> AssumptionReport:
    """Audit the uniform-in-eps evolution requirements by dense sampling.

    For each eps the layer is sampled on a (cells x density^2 x times) grid;
    suprema of the scaled deviation from the identity, the scaled velocity,
    the Jacobian norm and determinant bounds are recorded, together with the
    shift quotients ||F(.+l'eps) - F|| / |l' eps| for l' in {1, 2}.
    Violations are reported as flag strings, never exceptions.
    """
    ceilings = ceilings or {}
    det_floor = ceilings.get("det_floor", spec.det_floor)
    report = AssumptionReport(
        eps_list=list(eps_list),
        sup_psi_dev={},
        sup_psi_dot={},
        sup_F={},
        J_bounds={},
        sup_dtJ_pointwise={},
        shift_ratios={},
        flags=[],
    )
    z1 = np.linspace(0.02, 0.98, sample_density)
    z2 = np.linspace(-0.98, 0.98, sample_density)
    zz = np.array([(a, b) for a in z1 for b in z2])
    times = np.linspace(0.0, spec.horizon, 6)
    for eps in eps_list:
        n_cells = int(round(1.0 / eps))
        sup_dev = sup_dot = sup_F = sup_dtJ = 0.0
        J_min, J_max = np.inf, -np.inf
        shift = {1: 0.0, 2: 0.0}
        F_by_cell = {}
        for t in times:
            for k in range(n_cells):
                xp = eps * k
                psi = spec.psi(t, xp, zz)
                F = spec.grad(t, xp, zz)
                dt_psi = spec.dt(t, xp, zz)
                sup_dev = max(sup_dev, float(np.max(np.abs(psi - zz))))
                sup_dot = max(sup_dot, float(np.max(np.abs(dt_psi))))
                sup_F = max(sup_F, float(np.max(np.linalg.norm(F, ord=2, axis=(1, 2)))))
                det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
                J_min = min(J_min, float(det.min()))
                J_max = max(J_max, float(det.max()))
                h = _FD_STEP
                t0 = min(max(t, h), spec.horizon - h)
                Fp = spec.grad(t0 + h, xp, zz)
                Fm = spec.grad(t0 - h, xp, zz)
                detp = Fp[:, 0, 0] * Fp[:, 1, 1] - Fp[:, 0, 1] * Fp[:, 1, 0]
                detm = Fm[:, 0, 0] * Fm[:, 1, 1] - Fm[:, 0, 1] * Fm[:, 1, 0]
                sup_dtJ = max(sup_dtJ, float(np.max(np.abs(detp - detm) / (2 * h))))
                F_by_cell[k] = F
            for lp in (1, 2):
                for k in range(n_cells - lp):
                    dF = F_by_cell[k + lp] - F_by_cell[k]
                    ratio = float(
                        np.max(np.linalg.norm(dF, ord=2, axis=(1, 2)))
                    ) / (lp * eps)
                    shift[lp] = max(shift[lp], ratio)
        # the eps-scaled deviation (1/eps)|Psi_eps - id| equals |psi - id|
        report.sup_psi_dev[eps] = sup_dev
        report.sup_psi_dot[eps] = sup_dot
        report.sup_F[eps] = sup_F
        report.J_bounds[eps] = (J_min, J_max)
        report.sup_dtJ_pointwise[eps] = sup_dtJ
        report.shift_ratios[eps] = shift
        if J_min < det_floor:
            report.flags.append(
                f"SingularJacobian region at eps={eps}: min J = {J_min:.4f} "
                f"< {det_floor}"
            )
        for key in ("sup_psi_dev", "sup_psi_dot", "sup_F"):
            ceiling = ceilings.get(key)
            if ceiling is not None and getattr(report, key)[eps] > ceiling:
                report.flags.append(
                    f"{key} = {getattr(report, key)[eps]:.4f} exceeds "
                    f"ceiling {ceiling} at eps={eps}"
                )
    return report


# -- built-in evolutions -------------------------------------------------------

def _smoothstep(u):
    """C^2 quintic ramp on [0,1] with vanishing first/second derivatives."""
    u = np.clip(u, 0.0, 1.0)
    return u**3 * (10.0 - 15.0 * u + 6.0 * u**2)


def _smoothstep_d(u):
    inside = (u > 0.0) & (u < 1.0)
    u = np.clip(u, 0.0, 1.0)
    return np.where(inside, 30.0 * u**2 * (u - 1.0) ** 2, 0.0)


def _plateau(u, lo, rise, hi, fall):
    """Bump that is 0 outside [lo, hi], 1 on [lo+rise, hi-fall], C^2 glued."""
    up = _smoothstep((u - lo) / rise)
    down = _smoothstep((hi - u) / fall)
    return up * down


def _plateau_d(u, lo, rise, hi, fall):
    up = _smoothstep((u - lo) / rise)
    down = _smoothstep((hi - u) / fall)
    dup = _smoothstep_d((u - lo) / rise) / rise
    ddown = -_smoothstep_d((hi - u) / fall) / fall
    return dup * down + up * ddown


def static_spec(horizon: float = 0.5) -> TransformSpec:
    """Identity evolution; all transformed coefficients reduce to the data."""

    def _psi(t, xp, z):
        return np.array(z, dtype=float, copy=True)

    def _grad(t, xp, z):
        n = len(np.atleast_2d(z))
        F = np.zeros((n, 2, 2))
        F[:, 0, 0] = F[:, 1, 1] = 1.0
        return F

    def _dt(t, xp, z):
        return np.zeros((len(np.atleast_2d(z)), 2))

    return TransformSpec(
        name="static",
        displacement_fn=_psi,
        grad_fn=_grad,
        dt_fn=_dt,
        identity_band=0.1,
        horizon=horizon,
    )


def pinch_spec(
    channel: ChannelSpec,
    amplitude: float = 0.3,
    horizon: float = 0.5,
    band: float = 0.08,
    macro_modulation: float = 0.5,
) -> TransformSpec:
    """Channel-narrowing evolution with macroscopic modulation.

    Cell points contract towards the centerline c:
    psi = (c + (z1 - c) * rho, z2) with
    rho = 1 - amplitude * s(t) * B(z) * (1 + macro_modulation*sin(2 pi xp)).
    The bump B = b1(z1) b2(z2) equals 1 on the channel and vanishes on the
    boundary band, so the walls move while the cell faces stay fixed.  The
    ramp s(t) = sin^2(pi t / (2T)) starts the evolution from rest.
    """
    c = channel.center
    zz = np.linspace(-1.0, 1.0, 513)
    w_max = float(np.max(channel.width(zz)))
    wall = c - 0.5 * w_max
    if band >= wall:
        band = 0.8 * wall
    # z1 bump: rises between the identity band and the nearest wall
    lo1, hi1 = band, 1.0 - band
    rise1 = max(wall - band, 0.04)
    # z2 bump: keep the faces and a margin below them at the identity
    band2 = max(band, 0.15)
    lo2, hi2 = -1.0 + band2, 1.0 - band2
    rise2 = 0.35
    T = horizon
    a = amplitude

    def _s(t):
        return np.sin(0.5 * np.pi * min(max(t, 0.0), T) / T) ** 2

    def _s_dot(t):
        return 0.5 * np.pi / T * np.sin(np.pi * min(max(t, 0.0), T) / T)

    def _m(xp):
        return 1.0 + macro_modulation * np.sin(2.0 * np.pi * xp)

    def _bump(z):
        b1 = _plateau(z[:, 0], lo1, rise1, hi1, rise1)
        b2 = _plateau(z[:, 1], lo2, rise2, hi2, rise2)
        return b1, b2

    def _psi(t, xp, z):
        z = np.atleast_2d(z)
        b1, b2 = _bump(z)
        rho = 1.0 - a * _s(t) * b1 * b2 * _m(xp)
        out = np.empty_like(z)
        out[:, 0] = c + (z[:, 0] - c) * rho
        out[:, 1] = z[:, 1]
        return out

    def _grad(t, xp, z):
        z = np.atleast_2d(z)
        b1, b2 = _bump(z)
        db1 = _plateau_d(z[:, 0], lo1, rise1, hi1, rise1)
        db2 = _plateau_d(z[:, 1], lo2, rise2, hi2, rise2)
        coef = a * _s(t) * _m(xp)
        rho = 1.0 - coef * b1 * b2
        F = np.zeros((len(z), 2, 2))
        F[:, 0, 0] = rho + (z[:, 0] - c) * (-coef * db1 * b2)
        F[:, 0, 1] = (z[:, 0] - c) * (-coef * b1 * db2)
        F[:, 1, 1] = 1.0
        return F

    def _dt(t, xp, z):
        z = np.atleast_2d(z)
        b1, b2 = _bump(z)
        out = np.zeros((len(z), 2))
        out[:, 0] = (z[:, 0] - c) * (-a * _s_dot(t) * b1 * b2 * _m(xp))
        return out

    return TransformSpec(
        name="pinch",
        displacement_fn=_psi,
        grad_fn=_grad,
        dt_fn=_dt,
        identity_band=band,
        horizon=horizon,
        params={
            "amplitude": amplitude,
            "band": band,
            "macro_modulation": macro_modulation,
        },
    )


TRANSFORM_REGISTRY = {
    "static": lambda channel, horizon, **kw: static_spec(horizon),
    "pinch": lambda channel, horizon, **kw: pinch_spec(channel, horizon=horizon, **kw),
}
