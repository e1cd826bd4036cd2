"""Differentiable Poincare-ball operations, composed from tape primitives.

Each function mirrors a kernel in `geometry` but is built entirely out of
`autodiff` ops, so gradients are exact by construction rather than
hand-derived. Forward values agree with the `geometry` module to float
precision (tested), and the same clamping policy applies: norms floored,
artanh arguments kept below 1, inverse-trig arguments clipped to their
closed domains.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as td
from .autodiff import Tensor
from .geometry import ARTANH_ARG_MAX, BALL_EPS, DENOM_EPS


def mobius_add_rows(x: Tensor, y: Tensor, c: float) -> Tensor:
    """Row-wise gyrovector addition of two (N, d) tensors."""
    xx = td.rows_dot(x, x)
    yy = td.rows_dot(y, y)
    xy = td.rows_dot(x, y)
    coef_x = td.add(td.mul(xy, 2.0 * c) + td.mul(yy, c), 1.0)
    coef_y = td.add(td.mul(xx, -c), 1.0)
    num = td.scale_rows(x, coef_x) + td.scale_rows(y, coef_y)
    den = td.add(td.mul(xy, 2.0 * c) + td.mul(td.mul(xx, c * c), yy), 1.0)
    return td.div_rows(num, td.clamp(den, lo=DENOM_EPS))


def distance_rows(x: Tensor, y: Tensor, c: float) -> Tensor:
    """Row-wise geodesic distance -> (N, 1)."""
    sqrt_c = math.sqrt(c)
    w = mobius_add_rows(td.neg(x), y, c)
    arg = td.clamp(td.mul(td.row_norm(w), sqrt_c), hi=ARTANH_ARG_MAX)
    return td.mul(td.artanh(arg), 2.0 / sqrt_c)


def origin_distance_rows(x: Tensor, c: float) -> Tensor:
    """Row-wise distance to the origin -> (N, 1)."""
    sqrt_c = math.sqrt(c)
    arg = td.clamp(td.mul(td.row_norm(x), sqrt_c), hi=ARTANH_ARG_MAX)
    return td.mul(td.artanh(arg), 2.0 / sqrt_c)


def exp_map_origin_rows(v: Tensor, c: float) -> Tensor:
    """Project rows of a Euclidean (N, d) tensor into the ball via exp at the origin.

    The radial tanh gain is capped at 1 - BALL_EPS so every output row stays
    strictly inside with the same clearance `geometry.project_rows` enforces.
    """
    sqrt_c = math.sqrt(c)
    n = td.row_norm(v)
    scaled = td.mul(n, sqrt_c)
    radial = td.clamp(td.tanh(scaled), hi=1.0 - BALL_EPS)
    return td.scale_rows(v, td.div(radial, scaled))


def exterior_angle_rows(x: Tensor, y: Tensor) -> Tensor:
    """Row-wise entailment-cone exterior angle -> (N, 1).

    Rows with a degenerate base (|x| <= BALL_EPS) or coincident pair
    (|x - y| <= BALL_EPS) are masked to 0 by convention; the mask is a
    constant, so no gradient flows through those rows.
    """
    xx = td.rows_dot(x, x)
    yy = td.rows_dot(y, y)
    xy = td.rows_dot(x, y)
    nx = td.row_norm(x)
    diff = x - y
    nxy = td.row_norm(diff)
    one = x.tape.const(np.ones_like(xx.value))
    num = td.mul(xy, one + xx) - td.mul(xx, one + yy)
    inner = td.clamp(one + td.mul(xx, yy) - td.mul(xy, 2.0), lo=DENOM_EPS)
    den = td.clamp(td.mul(td.mul(nx, nxy), td.sqrt(inner)), lo=DENOM_EPS)
    cos_theta = td.clamp(td.div(num, den), lo=-1.0, hi=1.0)
    theta = td.acos(cos_theta)
    keep = x.tape.const(
        ((nx.value > BALL_EPS) & (nxy.value > BALL_EPS)).astype(np.float64)
    )
    return td.mul(theta, keep)


def aperture_rows(x: Tensor, K: float) -> Tensor:
    """Row-wise cone aperture arcsin(K (1 - |x|^2) / |x|) -> (N, 1).

    The arcsin argument is clipped to [-1, 1]; rows at or inside the norm
    floor get an argument >> 1 and therefore open fully to pi/2, matching
    the origin convention.
    """
    n = td.row_norm(x, floor=BALL_EPS)
    nn = td.rows_dot(x, x)
    one = x.tape.const(np.ones_like(nn.value))
    arg = td.div(td.mul(one - nn, K), n)
    return td.asin(td.clamp(arg, lo=-1.0, hi=1.0))
