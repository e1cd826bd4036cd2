"""Training objectives on the differentiation tape.

Six scalars and two phase composites. Every function takes tape tensors and
returns a scalar tensor, so gradients reach whatever was bound as a leaf:
the Euclidean pre-projection embeddings, the class-probability rows, and the
prototype coordinates (while trainable).

Ball inputs (`x`, `z`) are (L, d) rows already inside the ball of curvature
`c` (use `ballops.exp_map_origin_rows` to get there).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as td
from . import ballops as bo
from .autodiff import Tensor
from .errors import ContractViolation, GeometryError, ShapeError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12          # clamp on probabilities before the log
RADIUS_FLOOR = 1e-6         # floor on d(O, x) in the push-pull ratio
DECAY_KINDS = ("exp", "linear", "cosine")


def decay_factor(kind: str, u: float) -> float:
    """Timestep decay on [0, 1]: all kinds equal 1 at u = 0 and decrease."""
    if kind == "exp":
        return math.exp(-u)
    if kind == "linear":
        return 1.0 - u
    if kind == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * u))
    raise ShapeError(f"unknown decay kind {kind!r}; expected one of {DECAY_KINDS}")


@dataclass
class Prototypes:
    """One learnable ball point per action class; frozen after phase one."""

    points: np.ndarray
    curvature: float
    frozen: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ShapeError(f"need a (C >= 2, d) prototype matrix, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("non-finite prototype coordinates")
        if np.any(self.curvature * np.sum(pts * pts, axis=1) >= 1.0):
            raise GeometryError("prototypes must lie strictly inside the ball")
        self.points = pts

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def freeze(self) -> None:
        self.frozen = True
        self.points.flags.writeable = False

    def checksum(self) -> bytes:
        return self.points.tobytes()

    def min_pairwise_distance(self) -> float:
        from .geometry import distance_rows

        i, j = np.triu_indices(self.count, k=1)
        return float(np.min(distance_rows(self.points[i], self.points[j], self.curvature)))


@dataclass(frozen=True)
class LossWeights:
    """Objective weights plus the geometry constants they act through."""

    lam_ce: float = 0.5
    lam_entail: float = 0.05
    lam_margin: float = 0.1
    lam_pp: float = 0.1
    lam_gg: float = 0.1
    margin: float = 2.0
    cone_k: float = 0.1
    decay: str = "exp"

    def __post_init__(self):
        for name in ("lam_ce", "lam_entail", "lam_margin", "lam_pp", "lam_gg"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ShapeError(f"{name} must be finite and >= 0, got {v}")
        if not (math.isfinite(self.margin) and self.margin > 0.0):
            raise ShapeError(f"margin must be > 0, got {self.margin}")
        if not (math.isfinite(self.cone_k) and self.cone_k > 0.0):
            raise ShapeError(f"cone_k must be > 0, got {self.cone_k}")
        if self.decay not in DECAY_KINDS:
            raise ShapeError(f"decay must be one of {DECAY_KINDS}, got {self.decay!r}")


def cross_entropy(p: Tensor, y_onehot: np.ndarray) -> Tensor:
    """Mean negative log-likelihood normalized by L * C (not by L alone)."""
    y = np.asarray(y_onehot, dtype=np.float64)
    if p.value.shape != y.shape:
        raise ShapeError(f"probabilities {p.value.shape} vs targets {y.shape}")
    logp = td.log(td.clamp(p, lo=PROB_FLOOR))
    picked = td.mul(logp, p.tape.const(y))
    return td.mul(td.total(picked), -1.0 / y.size)


def temporal_entailment(x: Tensor, cone_k: float) -> Tensor:
    """Mean hinge over consecutive frames of (exterior angle - aperture).

    Zero when every frame lies within its predecessor's cone. Sequences
    shorter than two frames contribute zero (logged, not fatal).
    """
    length = x.value.shape[0]
    if length < 2:
        logger.warning("temporal entailment needs >= 2 frames, got %d; returning 0", length)
        return x.tape.const(np.zeros(()))
    head = td.slice_rows(x, 0, length - 1)
    tail = td.slice_rows(x, 1, length)
    theta = bo.exterior_angle_rows(head, tail)
    alpha = bo.aperture_rows(head, cone_k)
    return td.mean(td.relu(theta - alpha))


def prototype_margin(z: Tensor, margin: float, c: float) -> Tensor:
    """Pairwise repulsion: mean over ordered pairs of max(0, m - d(z_i, z_j)).

    The printed normalization is 1/(C(C-1)) over the C(C-1)/2 unordered
    pairs, i.e. two coincident prototypes cost m/2.
    """
    count = z.value.shape[0]
    if count < 2:
        raise ShapeError("margin loss needs at least two prototypes")
    i, j = np.triu_indices(count, k=1)
    zi = td.gather_rows(z, i)
    zj = td.gather_rows(z, j)
    hinge = td.relu(td.mul(bo.distance_rows(zi, zj, c), -1.0) + margin)
    return td.mul(td.total(hinge), 1.0 / (count * (count - 1)))


def push_pull(
    x: Tensor, z_assigned: Tensor, t: int, total_steps: int, decay: str, c: float
) -> Tensor:
    """Pull toward the assigned prototype, push away from the origin.

    Mean over frames of d(x, z)/max(d(O, x), RADIUS_FLOOR) minus
    d(O, x) * decay(t / T); the push term rewards radius, so the value may
    be negative.
    """
    if x.value.shape != z_assigned.value.shape:
        raise ShapeError(f"embeddings {x.value.shape} vs prototypes {z_assigned.value.shape}")
    pull = bo.distance_rows(x, z_assigned, c)
    radius = bo.origin_distance_rows(x, c)
    ratio = td.div(pull, td.clamp(radius, lo=RADIUS_FLOOR))
    factor = decay_factor(decay, t / total_steps)
    return td.mean(ratio - td.mul(radius, factor))


def geodesic_guidance(
    x: Tensor,
    z_assigned: Tensor,
    c: float,
    frozen: bool,
    allow_unfrozen: bool = False,
) -> Tensor:
    """Mean squared defect of d(O, z) = d(O, x) + d(x, z).

    Exactly zero when every embedding sits on the radial geodesic from the
    origin to its prototype. Prototypes must be frozen; `allow_unfrozen`
    exists only for the single-phase ablation where they are deliberately
    dynamic targets.
    """
    if not frozen and not allow_unfrozen:
        raise ContractViolation("geodesic guidance requires frozen prototypes")
    if x.value.shape != z_assigned.value.shape:
        raise ShapeError(f"embeddings {x.value.shape} vs prototypes {z_assigned.value.shape}")
    target = bo.origin_distance_rows(z_assigned, c)
    via = bo.origin_distance_rows(x, c) + bo.distance_rows(x, z_assigned, c)
    return td.mean(td.square(target - via))


def stabilization_total(
    ce: Tensor, entail: Tensor, margin: Tensor, pp: Tensor, weights: LossWeights
) -> Tensor:
    """Phase-one composite; gradients reach the network and the prototypes."""
    return (
        td.mul(ce, weights.lam_ce)
        + td.mul(entail, weights.lam_entail)
        + td.mul(margin, weights.lam_margin)
        + td.mul(pp, weights.lam_pp)
    )


def guidance_total(ce: Tensor, entail: Tensor, gg: Tensor, weights: LossWeights) -> Tensor:
    """Phase-two composite; prototypes are constants by then."""
    return (
        td.mul(ce, weights.lam_ce)
        + td.mul(entail, weights.lam_entail)
        + td.mul(gg, weights.lam_gg)
    )


def phase_for_epoch(epoch: int, stabilization_epochs: int) -> str:
    """'stabilization' while epoch < E1, 'guidance' from E1 on (boundary inclusive)."""
    return "stabilization" if epoch < stabilization_epochs else "guidance"
