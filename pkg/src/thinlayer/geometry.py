"""Reference cell, channel layer and tiling geometry.

The macroscopic domain is the planar box ``(0,1) x (-H,H)``.  A thin band of
thickness ``2*eps`` around the interface ``x2 = 0`` carries ``1/eps``
periodically repeated channels; each channel is the image of the reference
channel ``Z_*`` inside the unit cell ``Z = (0,1) x (-1,1)`` under the map
``z -> eps*(k + z1, z2)``.  Channels are parameterized by a width function
``w(z2)`` around a vertical centerline ``z1 = c``, which keeps every channel a
Lipschitz tube with flat top/bottom faces.

All objects here are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .errors import InvalidScale, OutOfDomain, ShapeViolation

#: distance below which a point is considered to lie on a boundary
GEOM_TOL = 1e-12

#: number of samples used for width-function validation
_N_SAMPLES = 2001


@dataclass(frozen=True)
class ChannelSpec:
    """Shape of the reference channel inside the unit cell.

    width_fn maps ``z2 in [-1, 1]`` to the channel width ``w(z2) in (0, 1)``;
    the channel occupies ``c - w/2 < z1 < c + w/2``.  boundary_margin is the
    smallest admissible gap between the channel walls and the lateral cell
    boundary.
    """

    width_fn: Callable[[np.ndarray], np.ndarray]
    center: float = 0.5
    boundary_margin: float = 0.05

    def width(self, z2):
        """Vectorized channel width w(z2)."""
        z2 = np.asarray(z2, dtype=float)
        return np.asarray(self.width_fn(z2), dtype=float)

    def walls(self, z2):
        """Left and right wall abscissas (c - w/2, c + w/2)."""
        w = self.width(z2)
        return self.center - 0.5 * w, self.center + 0.5 * w

    def validate(self):
        """Check positivity, the lateral margin and Lipschitz sampling.

        Raises ShapeViolation if the channel degenerates or touches the
        lateral cell boundary.  Returns the sampled Lipschitz constant of w.
        """
        z2 = np.linspace(-1.0, 1.0, _N_SAMPLES)
        w = self.width(z2)
        if not np.all(np.isfinite(w)):
            raise ShapeViolation("width function returned non-finite values")
        if np.any(w <= 0.0):
            raise ShapeViolation("channel width must be positive on [-1, 1]")
        lo, hi = self.center - 0.5 * w, self.center + 0.5 * w
        if np.any(lo < self.boundary_margin - GEOM_TOL) or np.any(
            hi > 1.0 - self.boundary_margin + GEOM_TOL
        ):
            raise ShapeViolation(
                "channel walls violate the lateral margin "
                f"delta_N = {self.boundary_margin}"
            )
        lip = float(np.max(np.abs(np.diff(w) / np.diff(z2))))
        if not np.isfinite(lip):
            raise ShapeViolation("width function is not Lipschitz on the sample grid")
        return lip


@dataclass(frozen=True)
class ReferenceGeometry:
    """Unit cell plus channel shape and the macroscopic half height H.

    Measures are computed once by adaptive quadrature:
    channel_area = |Z_*|, wall_length = |N| (both lateral wall curves),
    face_width_top/bottom = |S_*^+| / |S_*^-|.
    """

    channel: ChannelSpec
    half_height: float
    channel_area: float
    wall_length: float
    face_width_top: float
    face_width_bottom: float
    lipschitz_w: float = field(default=0.0, repr=False)

    @property
    def cell_area(self) -> float:
        return 2.0  # |Z| = |(0,1) x (-1,1)|


def build_reference_geometry(channel: ChannelSpec, H: float) -> ReferenceGeometry:
    """Validate the channel shape and compute the cell measures.

    |Z_*| = int w dz2 and |N| = 2 * int sqrt(1 + (w'/2)^2) dz2 are evaluated
    with adaptive quadrature; the width derivative uses central differences of
    the callback so arbitrary width functions are supported.
    """
    if H <= 0.0:
        raise ShapeViolation("half height H must be positive")
    lip = channel.validate()

    area, _ = quad(lambda s: float(channel.width(s)), -1.0, 1.0, limit=200)

    dh = 1e-7

    def _wall_speed(s):
        s0 = min(max(s, -1.0 + dh), 1.0 - dh)
        dw = (float(channel.width(s0 + dh)) - float(channel.width(s0 - dh))) / (2 * dh)
        return np.sqrt(1.0 + 0.25 * dw * dw)

    arclen, _ = quad(_wall_speed, -1.0, 1.0, limit=200)
    wall_length = 2.0 * arclen

    w_top = float(channel.width(1.0))
    w_bot = float(channel.width(-1.0))
    if w_top <= 0.0 or w_bot <= 0.0:
        raise ShapeViolation("top/bottom channel faces must have positive measure")
    if not 0.0 < area < 2.0:
        raise ShapeViolation(f"channel area {area} outside (0, |Z|)")
    if wall_length < 4.0 - 1e-9:
        # two wall curves, each spanning z2 in (-1,1), cannot be shorter than 2
        raise ShapeViolation(f"wall length {wall_length} below the geometric minimum")

    return ReferenceGeometry(
        channel=channel,
        half_height=float(H),
        channel_area=area,
        wall_length=wall_length,
        face_width_top=w_top,
        face_width_bottom=w_bot,
        lipschitz_w=lip,
    )


@dataclass(frozen=True)
class TilingIndex:
    """Index set of the eps-scaled cells tiling the layer.

    Cell k covers ``eps*(k, k+1) x (-eps, eps)``; cell_to_global maps cell
    coordinates z to physical coordinates ``eps*(k + z1, z2)``.
    """

    eps: float
    n_cells: int

    @property
    def anchors(self) -> np.ndarray:
        """Left cell edges eps*k, the piecewise-constant macro positions."""
        return self.eps * np.arange(self.n_cells)

    def cell_to_global(self, k: int, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = np.empty_like(z)
        out[:, 0] = self.eps * (k + z[:, 0])
        out[:, 1] = self.eps * z[:, 1]
        return out

    def global_to_cell(self, x: np.ndarray):
        """Inverse map: physical points -> (cell index, cell coordinates)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k = np.clip(np.floor(x[:, 0] / self.eps).astype(int), 0, self.n_cells - 1)
        z = np.empty_like(x)
        z[:, 0] = x[:, 0] / self.eps - k
        z[:, 1] = x[:, 1] / self.eps
        return k, z


def admissible_scale(eps: float) -> bool:
    """True when 1/eps is an integer (cells tile the interface exactly)."""
    if eps <= 0.0:
        return False
    inv = 1.0 / eps
    return abs(inv - round(inv)) < 1e-9


def tile_layer(geom: ReferenceGeometry, eps: float) -> TilingIndex:
    """Tile the layer with 1/eps scaled channel cells."""
    if not admissible_scale(eps):
        raise InvalidScale(f"1/eps must be an integer, got eps = {eps}")
    if eps >= geom.half_height:
        raise InvalidScale(f"eps = {eps} must be smaller than H = {geom.half_height}")
    return TilingIndex(eps=float(eps), n_cells=int(round(1.0 / eps)))


def classify_point(geom: ReferenceGeometry, eps: float, x) -> str:
    """Classify a point of the closed box into region/boundary tags.

    Returns one of 'bulk+', 'bulk-', 'channel', 'hole', 'S+', 'S-', 'N',
    'exterior'.  Boundary tags win over region tags for points within
    GEOM_TOL of a boundary; the wall tag 'N' takes precedence over 'S+'/'S-'
    at channel corners so that ties resolve deterministically.
    """
    tiling = tile_layer(geom, eps)
    x1, x2 = float(x[0]), float(x[1])
    H = geom.half_height
    if x1 < -GEOM_TOL or x1 > 1.0 + GEOM_TOL or abs(x2) > H + GEOM_TOL:
        raise OutOfDomain(f"point {x} outside the closed box [0,1] x [-H,H]")

    c = geom.channel.center
    in_band = abs(x2) <= eps + GEOM_TOL
    if in_band:
        k, z = tiling.global_to_cell([[x1, x2]])
        z1, z2 = float(z[0, 0]), float(np.clip(z[0, 1], -1.0, 1.0))
        w = float(geom.channel.width(z2))
        lo, hi = c - 0.5 * w, c + 0.5 * w
        # distances in physical units
        d_wall = eps * min(abs(z1 - lo), abs(z1 - hi))
        inside_z1 = lo - GEOM_TOL / eps <= z1 <= hi + GEOM_TOL / eps
        if d_wall <= GEOM_TOL and abs(x2) <= eps + GEOM_TOL:
            return "N"
        if abs(x2 - eps) <= GEOM_TOL and inside_z1:
            return "S+"
        if abs(x2 + eps) <= GEOM_TOL and inside_z1:
            return "S-"

    on_box = (
        x1 <= GEOM_TOL
        or x1 >= 1.0 - GEOM_TOL
        or abs(abs(x2) - H) <= GEOM_TOL
        or (abs(abs(x2) - eps) <= GEOM_TOL)
    )
    if abs(x2) > eps + GEOM_TOL:
        if on_box:
            return "exterior"
        return "bulk+" if x2 > 0 else "bulk-"
    # strictly inside the layer band
    k, z = tiling.global_to_cell([[x1, x2]])
    z1, z2 = float(z[0, 0]), float(np.clip(z[0, 1], -1.0, 1.0))
    w = float(geom.channel.width(z2))
    if c - 0.5 * w < z1 < c + 0.5 * w:
        return "channel"
    return "hole"


# -- width-function registry ------------------------------------------------

def straight_width(w: float) -> ChannelSpec:
    """Constant-width channel (rectangular reference channel)."""
    return ChannelSpec(width_fn=lambda z2: np.full_like(np.asarray(z2, float), w))


def linear_width(w0: float, slope: float) -> ChannelSpec:
    """Linearly varying width w0 + slope*z2."""
    return ChannelSpec(width_fn=lambda z2: w0 + slope * np.asarray(z2, float))


def cosine_width(w0: float, amp: float) -> ChannelSpec:
    """Cosine-bulged width w0 + amp*cos(pi*z2)."""
    return ChannelSpec(width_fn=lambda z2: w0 + amp * np.cos(np.pi * np.asarray(z2, float)))


WIDTH_REGISTRY = {
    "straight": straight_width,
    "linear": linear_width,
    "cosine": cosine_width,
}
