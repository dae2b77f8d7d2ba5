"""Problem data: coefficients, reactions, initial states, sources.

Layer coefficients are specified in the cell frame as callables of
``(t, xp, z)``; the micro solver samples them at the unfolded coordinates of
its quadrature points (anchor convention ``xp = eps*floor(x1/eps)``) and the
homogenized solver at the interface nodes, so a single dataset drives both
levels.

Reactions come from a registry of globally Lipschitz nonlinearities (clipped
where the raw law is not); each entry declares its Lipschitz constant so the
validation can check the sampled quotient against it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DataMismatch
from .geometry import ReferenceGeometry


@dataclass
class Reaction:
    """Globally Lipschitz reaction rate for one species.

    fn maps the concentration array U of shape (m, n) to (n,) values;
    lipschitz is the declared constant used by the (sampled) validation.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    name: str = "custom"

    def __call__(self, U):
        return self.fn(np.atleast_2d(U))


def _zero():
    return Reaction(lambda U: np.zeros(U.shape[1]), 0.0, "zero")


def _linear_decay(k=1.0, species=0):
    return Reaction(lambda U: -k * U[int(species)], abs(k), f"linear_decay({k})")


def _logistic_clipped(r=1.0, K=1.0, cap=10.0, species=0):
    s = int(species)

    def fn(U):
        u = np.clip(U[s], -cap, cap)
        return r * u * (1.0 - u / K)

    return Reaction(fn, abs(r) * (1.0 + 2.0 * cap / K), f"logistic_clipped({r},{K},{cap})")


def _langmuir_clipped(ka=1.0, kd=0.5, cap=10.0, species=0):
    s = int(species)

    def fn(U):
        u = np.clip(U[s], 0.0, cap)
        return ka * u / (1.0 + u) - kd * u

    return Reaction(fn, abs(ka) + abs(kd), f"langmuir_clipped({ka},{kd},{cap})")


REACTION_REGISTRY = {
    "zero": _zero,
    "linear_decay": _linear_decay,
    "logistic_clipped": _logistic_clipped,
    "langmuir_clipped": _langmuir_clipped,
}


def parse_registry_key(text: str, registry: dict, what: str):
    """Instantiate `name` or `name(a, b, ...)` from a registry."""
    text = text.strip()
    m = re.fullmatch(r"([a-zA-Z_][a-zA-Z0-9_]*)\s*(?:\((.*)\))?", text)
    if not m:
        raise ConfigError(what, f"cannot parse registry key '{text}'")
    name, argstr = m.group(1), m.group(2)
    if name not in registry:
        raise ConfigError(what, f"unknown {what} key '{name}' "
                                f"(have {sorted(registry)})")
    args = []
    if argstr and argstr.strip():
        try:
            args = [float(a) for a in argstr.split(",")]
        except ValueError as exc:
            raise ConfigError(what, f"bad arguments in '{text}': {exc}") from None
    return registry[name](*args)


# -- initial data -------------------------------------------------------------

@dataclass
class InitialData:
    """Consistent initial state across the three discretization frames.

    micro_factory(eps) gives a single global callable on reference micro
    coordinates (continuous through the layer band); bulk(points, sign) runs
    on the sharp bulk domains (sign picks the side, which disambiguates
    interface values); cell gives the layer profile on (xp, z).  The three
    agree on the interfaces, so tied degrees of freedom start consistent.
    """

    micro_factory: Callable[[float], Callable]
    bulk: Callable
    cell: Callable
    name: str = "custom"


def _constant(c=1.0):
    return InitialData(
        micro_factory=lambda eps: lambda p: np.full(len(np.atleast_2d(p)), c),
        bulk=lambda p, sign: np.full(len(np.atleast_2d(p)), c),
        cell=lambda xp, z: np.full(len(np.atleast_2d(z)), c),
        name=f"constant({c})",
    )


def _two_reservoir(a=1.0, b=0.0):
    def micro_factory(eps):
        def fn(p):
            p = np.atleast_2d(p)
            s = np.clip(p[:, 1] / eps, -1.0, 1.0)
            return 0.5 * (a + b) + 0.5 * (a - b) * s

        return fn

    def bulk(p, sign):
        return np.full(len(np.atleast_2d(p)), a if sign > 0 else b)

    def cell(xp, z):
        z = np.atleast_2d(z)
        return 0.5 * (a + b) + 0.5 * (a - b) * z[:, 1]

    return InitialData(micro_factory, bulk, cell, f"two_reservoir({a},{b})")


def _gaussian_bump(x0=0.5, y0=0.0, sigma=0.2):
    def profile(p):
        p = np.atleast_2d(p)
        r2 = (p[:, 0] - x0) ** 2 + (p[:, 1] - y0) ** 2
        return np.exp(-r2 / (2.0 * sigma**2))

    def cell(xp, z):
        z = np.atleast_2d(z)
        r2 = (xp - x0) ** 2 + y0**2
        return np.full(len(z), np.exp(-r2 / (2.0 * sigma**2)))

    return InitialData(
        lambda eps: profile, lambda p, sign: profile(p), cell,
        f"gaussian_bump({x0},{y0},{sigma})",
    )


INITIAL_REGISTRY = {
    "constant": _constant,
    "two_reservoir": _two_reservoir,
    "gaussian_bump": _gaussian_bump,
}


# -- layer coefficient fields --------------------------------------------------

def _iso(d):
    return d * np.eye(2)


def _layer_constant(d=1.0):
    def fn(t, xp, z):
        n = len(np.atleast_2d(z))
        return np.broadcast_to(_iso(d), (n, 2, 2))

    fn.description = f"constant({d})"
    return fn


def _layer_x_modulated(d0=1.0, amp=0.3):
    def fn(t, xp, z):
        n = len(np.atleast_2d(z))
        d = d0 * (1.0 + amp * np.sin(2.0 * np.pi * xp))
        return np.broadcast_to(_iso(d), (n, 2, 2))

    fn.description = f"x_modulated({d0},{amp})"
    return fn


LAYER_DIFFUSION_REGISTRY = {
    "constant": _layer_constant,
    "x_modulated": _layer_x_modulated,
}


# -- species / problem container ----------------------------------------------

@dataclass
class SpeciesData:
    """Coefficients, kinetics and initial data for one species."""

    D_plus: np.ndarray
    D_minus: np.ndarray
    D_layer: Callable
    q_plus: np.ndarray
    q_minus: np.ndarray
    q_layer: Callable
    f: Reaction
    g: Reaction
    h: Reaction
    initial: InitialData
    source_bulk: Optional[Callable] = None   # (t, pts) -> values
    source_layer: Optional[Callable] = None  # (t, pts) in micro coordinates
    exact_bulk: Optional[Callable] = None    # (t, pts) manufactured solution


@dataclass
class ProblemData:
    """All species plus validation parameters."""

    species: list
    ellipticity_floor: float = 1e-3
    seed: int = 0

    @property
    def m(self) -> int:
        return len(self.species)

    def validate(self, horizon: float = 0.5):
        """Sampled checks of ellipticity, bounded advection and the declared
        Lipschitz constants (1e4 random pairs per reaction)."""
        rng = np.random.default_rng(self.seed)
        zz = np.column_stack(
            [rng.uniform(0.05, 0.95, 64), rng.uniform(-0.95, 0.95, 64)]
        )
        for j, spd in enumerate(self.species):
            for D in (spd.D_plus, spd.D_minus):
                lam = np.linalg.eigvalsh(0.5 * (D + D.T)).min()
                if lam < self.ellipticity_floor:
                    raise DataMismatch(
                        f"species {j}: bulk diffusion eigenvalue {lam:.3e} "
                        f"below floor {self.ellipticity_floor}"
                    )
            for t in np.linspace(0.0, horizon, 3):
                for xp in (0.0, 0.3, 0.7):
                    Dl = np.asarray(spd.D_layer(t, xp, zz))
                    lam = np.linalg.eigvalsh(
                        0.5 * (Dl + np.swapaxes(Dl, -1, -2))
                    ).min()
                    if lam < self.ellipticity_floor:
                        raise DataMismatch(
                            f"species {j}: layer diffusion eigenvalue "
                            f"{lam:.3e} below floor"
                        )
                    ql = np.asarray(spd.q_layer(t, xp, zz))
                    if not np.all(np.isfinite(ql)):
                        raise DataMismatch(f"species {j}: layer advection not finite")
            if not (
                np.all(np.isfinite(spd.q_plus)) and np.all(np.isfinite(spd.q_minus))
            ):
                raise DataMismatch(f"species {j}: bulk advection not finite")
            for label, rx in (("f", spd.f), ("g", spd.g), ("h", spd.h)):
                _check_lipschitz(rx, self.m, rng, f"species {j} reaction {label}")
        return True


def _check_lipschitz(rx: Reaction, m: int, rng, label: str, n_pairs: int = 10_000):
    U = rng.uniform(-3.0, 3.0, size=(m, n_pairs))
    V = rng.uniform(-3.0, 3.0, size=(m, n_pairs))
    dist = np.linalg.norm(U - V, axis=0)
    ok = dist > 1e-9
    quot = np.abs(rx(U) - rx(V))[ok] / dist[ok]
    limit = 1.05 * rx.lipschitz + 1e-12
    if np.any(quot > limit):
        raise DataMismatch(
            f"{label} ('{rx.name}'): sampled Lipschitz quotient "
            f"{quot.max():.4f} exceeds 1.05 x declared {rx.lipschitz}"
        )


def _zero_velocity(t, xp, z):
    return np.zeros((len(np.atleast_2d(z)), 2))


def make_species(
    d_plus=1.0,
    d_minus=1.0,
    d_layer="constant(1.0)",
    q_plus=(0.0, 0.0),
    q_minus=(0.0, 0.0),
    q_layer=(0.0, 0.0),
    f="zero",
    g="zero",
    h="zero",
    initial="constant(1.0)",
) -> SpeciesData:
    """Assemble one species from registry keys and scalar coefficients."""

    def _tensor(d):
        arr = np.asarray(d, float)
        return arr if arr.shape == (2, 2) else float(arr) * np.eye(2)

    qv = np.asarray(q_layer, float)

    def q_layer_fn(t, xp, z):
        return np.broadcast_to(qv, (len(np.atleast_2d(z)), 2))

    return SpeciesData(
        D_plus=_tensor(d_plus),
        D_minus=_tensor(d_minus),
        D_layer=parse_registry_key(d_layer, LAYER_DIFFUSION_REGISTRY, "d_layer"),
        q_plus=np.asarray(q_plus, float),
        q_minus=np.asarray(q_minus, float),
        q_layer=q_layer_fn,
        f=parse_registry_key(f, REACTION_REGISTRY, "reaction f"),
        g=parse_registry_key(g, REACTION_REGISTRY, "reaction g"),
        h=parse_registry_key(h, REACTION_REGISTRY, "reaction h"),
        initial=parse_registry_key(initial, INITIAL_REGISTRY, "initial"),
    )


# -- manufactured verification case --------------------------------------------

def attach_mms_cos(data: ProblemData, geom: ReferenceGeometry, eps: float):
    """Equip species 0 with the compatible manufactured solution.

    Bulk profile u(t, x) = exp(-t) * cos(pi (x2 -+ eps)/(H - eps)) has zero
    normal flux on every exterior face and on the channel faces, so it
    couples to a spatially constant layer profile l(t) = exp(-t) with no
    interface defect.  Injected volume sources make the pair an exact
    solution of the full static system; all reactions must be zero.
    """
    H = geom.half_height
    kap = np.pi / (H - eps)
    spd = data.species[0]
    if spd.f.lipschitz or spd.g.lipschitz or spd.h.lipschitz:
        raise DataMismatch("manufactured case requires zero reactions")
    d_plus = float(spd.D_plus[1, 1])
    d_minus = float(spd.D_minus[1, 1])

    def exact_bulk(t, pts):
        pts = np.atleast_2d(pts)
        shift = np.where(pts[:, 1] > 0.0, -eps, eps)
        return np.exp(-t) * np.cos(kap * (pts[:, 1] + shift))

    def source_bulk(t, pts):
        pts = np.atleast_2d(pts)
        d = np.where(pts[:, 1] > 0.0, d_plus, d_minus)
        return (d * kap**2 - 1.0) * exact_bulk(t, pts)

    def exact_layer(t, pts):
        return np.exp(-t) * np.ones(len(np.atleast_2d(pts)))

    def source_layer(t, pts):
        return -exact_layer(t, pts)

    def u0_micro_factory(_eps):
        def fn(pts):
            pts = np.atleast_2d(pts)
            vals = exact_bulk(0.0, pts)
            inside = np.abs(pts[:, 1]) <= eps * (1.0 + 1e-12)
            vals[inside] = 1.0
            return vals

        return fn

    spd.source_bulk = source_bulk
    spd.source_layer = source_layer
    spd.exact_bulk = exact_bulk
    spd.initial = InitialData(
        micro_factory=u0_micro_factory,
        bulk=lambda p, sign: exact_bulk(0.0, p),
        cell=lambda xp, z: np.ones(len(np.atleast_2d(z))),
        name="mms_cos",
    )
    return data
