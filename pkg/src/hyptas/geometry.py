"""Poincare-ball geometry: Mobius arithmetic, exp/log maps, geodesic
distance, entailment-cone angles, and safe projection into the open ball.

All math runs in double precision over immutable value types. The ball of
curvature magnitude c has Euclidean radius 1/sqrt(c); boundary-adjacent
quantities are clamped (BALL_EPS on norms, DENOM_EPS on denominators,
inverse-trig arguments to their closed domains) so no operation can leave
the open ball or divide by zero.

Row-batched helpers (`*_rows`) operate on (N, d) float64 arrays and are the
workhorses for the optimizer and the trainer; the typed single-point API is
the reference the batched forms are tested against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError

BALL_EPS = 1e-5        # norm clearance kept from the ball boundary
DENOM_EPS = 1e-15      # floor for denominators
ARTANH_ARG_MAX = 1.0 - 1e-12


def _as_vector(coords) -> np.ndarray:
    arr = np.asarray(coords, dtype=np.float64)
    if arr.ndim != 1:
        raise GeometryError(f"expected a 1-D coordinate vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("non-finite coordinates")
    return arr


@dataclass(frozen=True)
class Curvature:
    """Curvature magnitude c > 0; the manifold has sectional curvature -c."""

    c: float

    def __post_init__(self):
        if not isinstance(self.c, (int, float)) or isinstance(self.c, bool):
            raise GeometryError(f"curvature must be a real number, got {type(self.c).__name__}")
        c = float(self.c)
        if not math.isfinite(c) or c <= 0.0:
            raise GeometryError(f"curvature must be finite and > 0, got {c}")
        object.__setattr__(self, "c", c)

    @property
    def sqrt(self) -> float:
        return math.sqrt(self.c)

    @property
    def radius(self) -> float:
        """Euclidean radius of the open ball."""
        return 1.0 / math.sqrt(self.c)


@dataclass(frozen=True)
class PoincarePoint:
    """A point strictly inside the ball: c * ||coords||^2 < 1."""

    coords: np.ndarray
    curvature: Curvature

    def __post_init__(self):
        arr = _as_vector(self.coords).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "coords", arr)
        if self.curvature.c * float(arr @ arr) >= 1.0:
            raise GeometryError(
                f"point with norm {np.linalg.norm(arr):.6g} is not strictly inside "
                f"the ball of curvature {self.curvature.c}"
            )

    @property
    def dim(self) -> int:
        return self.coords.shape[0]

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coords))


@dataclass(frozen=True)
class TangentVector:
    """A tangent vector attached at `base`."""

    coords: np.ndarray
    base: PoincarePoint

    def __post_init__(self):
        arr = _as_vector(self.coords).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "coords", arr)
        if arr.shape[0] != self.base.dim:
            raise GeometryError(
                f"tangent vector of dimension {arr.shape[0]} attached at a "
                f"{self.base.dim}-dimensional point"
            )

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coords))


def origin(dim: int, curvature: Curvature) -> PoincarePoint:
    return PoincarePoint(np.zeros(dim), curvature)


def _check_same_ball(x: PoincarePoint, y: PoincarePoint) -> None:
    if x.dim != y.dim:
        raise GeometryError(f"dimension mismatch: {x.dim} vs {y.dim}")
    if x.curvature.c != y.curvature.c:
        raise GeometryError(f"curvature mismatch: {x.curvature.c} vs {y.curvature.c}")


# ---------------------------------------------------------------------------
# Row-batched kernels over (N, d) arrays.
# ---------------------------------------------------------------------------

def mobius_add_rows(x: np.ndarray, y: np.ndarray, c: float) -> np.ndarray:
    """Gyrovector addition x (+) y applied row-wise.

    ((1 + 2c<x,y> + c|y|^2) x + (1 - c|x|^2) y) / (1 + 2c<x,y> + c^2 |x|^2 |y|^2)
    """
    xx = np.sum(x * x, axis=-1, keepdims=True)
    yy = np.sum(y * y, axis=-1, keepdims=True)
    xy = np.sum(x * y, axis=-1, keepdims=True)
    num = (1.0 + 2.0 * c * xy + c * yy) * x + (1.0 - c * xx) * y
    den = 1.0 + 2.0 * c * xy + c * c * xx * yy
    return num / np.maximum(den, DENOM_EPS)


def project_rows(x: np.ndarray, c: float) -> np.ndarray:
    """Rescale any row with c*|row|^2 >= (1 - BALL_EPS)^2 to norm (1-BALL_EPS)/sqrt(c)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    limit = (1.0 - BALL_EPS) / math.sqrt(c)
    scale = np.where(norms >= limit, limit / np.maximum(norms, DENOM_EPS), 1.0)
    return x * scale


def exp_map_rows(x: np.ndarray, v: np.ndarray, c: float) -> np.ndarray:
    """Exponential map at each row of x applied to the matching row of v."""
    sqrt_c = math.sqrt(c)
    xx = np.sum(x * x, axis=-1, keepdims=True)
    lam = 2.0 / np.maximum(1.0 - c * xx, DENOM_EPS)
    vnorm = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.maximum(vnorm, DENOM_EPS)
    gain = np.tanh(sqrt_c * lam * vnorm / 2.0) / (sqrt_c * safe)
    second = np.where(vnorm > 0.0, gain * v, np.zeros_like(v))
    return project_rows(mobius_add_rows(x, second, c), c)


def exp_map_origin_rows(v: np.ndarray, c: float) -> np.ndarray:
    """exp at the origin: tanh(sqrt(c)|v|) v / (sqrt(c)|v|), projected inside."""
    sqrt_c = math.sqrt(c)
    vnorm = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.maximum(vnorm, DENOM_EPS)
    radial = np.minimum(np.tanh(sqrt_c * vnorm), 1.0 - BALL_EPS)
    return (radial / (sqrt_c * safe)) * v


def log_map_rows(x: np.ndarray, y: np.ndarray, c: float) -> np.ndarray:
    """Logarithmic map at each row of x toward the matching row of y."""
    sqrt_c = math.sqrt(c)
    w = mobius_add_rows(-x, y, c)
    wnorm = np.linalg.norm(w, axis=-1, keepdims=True)
    xx = np.sum(x * x, axis=-1, keepdims=True)
    lam = 2.0 / np.maximum(1.0 - c * xx, DENOM_EPS)
    arg = np.minimum(sqrt_c * wnorm, ARTANH_ARG_MAX)
    gain = (2.0 / (sqrt_c * lam)) * np.arctanh(arg) / np.maximum(wnorm, DENOM_EPS)
    return np.where(wnorm > 0.0, gain * w, np.zeros_like(w))


def distance_rows(x: np.ndarray, y: np.ndarray, c: float) -> np.ndarray:
    """Geodesic distance per row: (2/sqrt(c)) artanh(sqrt(c) |(-x) (+) y|)."""
    sqrt_c = math.sqrt(c)
    w = mobius_add_rows(-x, y, c)
    arg = np.minimum(sqrt_c * np.linalg.norm(w, axis=-1), ARTANH_ARG_MAX)
    return (2.0 / sqrt_c) * np.arctanh(arg)


def origin_distance_rows(x: np.ndarray, c: float) -> np.ndarray:
    sqrt_c = math.sqrt(c)
    arg = np.minimum(sqrt_c * np.linalg.norm(x, axis=-1), ARTANH_ARG_MAX)
    return (2.0 / sqrt_c) * np.arctanh(arg)


def conformal_factor_rows(x: np.ndarray, c: float) -> np.ndarray:
    xx = np.sum(x * x, axis=-1)
    return 2.0 / np.maximum(1.0 - c * xx, DENOM_EPS)


# ---------------------------------------------------------------------------
# Typed single-point API.
# ---------------------------------------------------------------------------

def mobius_add(x: PoincarePoint, y: PoincarePoint) -> PoincarePoint:
    """x (+) y, projected back inside if the result lands within BALL_EPS of the boundary.

    Adding the origin on either side returns the other operand exactly.
    """
    _check_same_ball(x, y)
    c = x.curvature.c
    out = mobius_add_rows(x.coords[None, :], y.coords[None, :], c)[0]
    return PoincarePoint(project_rows(out, c), x.curvature)


def conformal_factor(x: PoincarePoint) -> float:
    """lambda_c(x) = 2 / (1 - c|x|^2); equals 2 at the origin, >= 2 everywhere."""
    return float(conformal_factor_rows(x.coords[None, :], x.curvature.c)[0])


def exp_map(x: PoincarePoint, v: TangentVector) -> PoincarePoint:
    """Map the tangent vector v at x onto the ball; the zero vector returns x."""
    if v.base is not x and not (
        v.base.curvature.c == x.curvature.c and np.array_equal(v.base.coords, x.coords)
    ):
        raise GeometryError("tangent vector is not based at the given point")
    if v.norm == 0.0:
        return x
    out = exp_map_rows(x.coords[None, :], v.coords[None, :], x.curvature.c)[0]
    return PoincarePoint(out, x.curvature)


def log_map(x: PoincarePoint, y: PoincarePoint) -> TangentVector:
    """Inverse of exp_map: exp_map(x, log_map(x, y)) == y up to float error."""
    _check_same_ball(x, y)
    out = log_map_rows(x.coords[None, :], y.coords[None, :], x.curvature.c)[0]
    return TangentVector(out, x)


def poincare_distance(x: PoincarePoint, y: PoincarePoint) -> float:
    _check_same_ball(x, y)
    return float(distance_rows(x.coords[None, :], y.coords[None, :], x.curvature.c)[0])


def exterior_angle(x: PoincarePoint, y: PoincarePoint) -> float:
    """Angle at x between the radially-outward cone axis and the direction of y.

    Uses the nonsingular entailment-cone form
        cos(theta) = (<x,y>(1+|x|^2) - |x|^2 (1+|y|^2))
                     / (|x| |x-y| sqrt(1 + |x|^2 |y|^2 - 2<x,y>))
    which is exactly 0 for y radially outward of x. Degenerate inputs
    (|x| <= BALL_EPS or |x-y| <= BALL_EPS) return 0 by convention.
    """
    _check_same_ball(x, y)
    return float(exterior_angle_rows(x.coords[None, :], y.coords[None, :])[0])


def exterior_angle_rows(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xx = np.sum(x * x, axis=-1)
    yy = np.sum(y * y, axis=-1)
    xy = np.sum(x * y, axis=-1)
    nx = np.sqrt(xx)
    nxy = np.linalg.norm(x - y, axis=-1)
    num = xy * (1.0 + xx) - xx * (1.0 + yy)
    inner = np.maximum(1.0 + xx * yy - 2.0 * xy, DENOM_EPS)
    den = np.maximum(nx * nxy * np.sqrt(inner), DENOM_EPS)
    cos_theta = np.clip(num / den, -1.0, 1.0)
    # arccos amplifies rounding near +/-1 to ~1e-8; radially outward pairs must
    # come out exactly 0, so cosines within 1e-12 of the ends snap to them.
    cos_theta = np.where(cos_theta >= 1.0 - 1e-12, 1.0, cos_theta)
    cos_theta = np.where(cos_theta <= -1.0 + 1e-12, -1.0, cos_theta)
    theta = np.arccos(cos_theta)
    degenerate = (nx <= BALL_EPS) | (nxy <= BALL_EPS)
    return np.where(degenerate, 0.0, theta)


def aperture(x: PoincarePoint, K: float) -> float:
    """Half-angle of the entailment cone at x: arcsin(K (1 - |x|^2) / |x|).

    The arcsin argument is clamped to [-1, 1]; at the origin (|x| <= BALL_EPS)
    or whenever the argument exceeds 1 the cone opens fully to pi/2.
    """
    if not (math.isfinite(K) and K > 0.0):
        raise GeometryError(f"cone constant K must be finite and > 0, got {K}")
    return float(aperture_rows(x.coords[None, :], K)[0])


def aperture_rows(x: np.ndarray, K: float) -> np.ndarray:
    nx = np.linalg.norm(x, axis=-1)
    arg = K * (1.0 - nx * nx) / np.maximum(nx, BALL_EPS)
    return np.arcsin(np.clip(arg, -1.0, 1.0))


def project_to_ball(coords, curvature: Curvature) -> PoincarePoint:
    """Return the input as a ball point, rescaling only near-boundary vectors.

    Vectors with c|x|^2 < (1 - BALL_EPS)^2 pass through unchanged; anything
    else is rescaled to norm (1 - BALL_EPS)/sqrt(c).
    """
    arr = _as_vector(coords)
    return PoincarePoint(project_rows(arr[None, :], curvature.c)[0], curvature)
