"""Desk-scale denoiser: a dilated temporal-convolutional encoder that
produces condition features (plus an auxiliary classification head), and a
timestep-aware decoder that maps (noisy label signal, condition, step) to
per-frame embeddings and class probabilities.

The decoder's final-layer output, before the classification head, is the
embedding the hyperbolic losses supervise. Condition masking implements the
position / boundary / relation priors by zeroing rows of the condition
inside the graph, so masked frames contribute no encoder gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as td
from .autodiff import Tape, Tensor
from .errors import ShapeError
from .metrics import Segment

logger = logging.getLogger(__name__)

MASK_KINDS = ("none", "position", "boundary", "relation")


@dataclass(frozen=True)
class DenoiserConfig:
    feature_dim: int
    classes: int
    embed_dim: int = 16
    encoder_channels: int = 32
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    kernel: int = 3
    step_dim: int = 64
    boundary_halfwidth: int = 2
    aux_head: bool = True

    def __post_init__(self):
        for name in ("feature_dim", "classes", "embed_dim", "encoder_channels", "kernel", "step_dim"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.boundary_halfwidth < 0:
            raise ShapeError("boundary_halfwidth must be >= 0")


def sinusoidal_step_embedding(t: int, dim: int) -> np.ndarray:
    """(1, dim) sin/cos features of the integer timestep."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = t * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    if emb.shape[0] < dim:
        emb = np.concatenate([emb, np.zeros(dim - emb.shape[0])])
    return emb[None, :]


def _glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Denoiser:
    """Parameter container; forward passes are built on a caller-owned tape."""

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        k, ch, d = config.kernel, config.encoder_channels, config.embed_dim
        params: dict[str, np.ndarray] = {}

        def conv_init(name, cin, cout):
            params[f"{name}.w"] = _glorot(rng, (k, cin, cout), k * cin, cout)
            # small positive bias keeps every relu channel initially live
            params[f"{name}.b"] = np.full((1, cout), 0.01)

        conv_init("enc.in", config.feature_dim, ch)
        for i, _ in enumerate(config.dilations[1:], start=1):
            conv_init(f"enc.layer{i}", ch, ch)
        params["enc.head.w"] = _glorot(rng, (ch, config.classes), ch, config.classes)
        params["enc.head.b"] = np.zeros((1, config.classes))

        conv_init("dec.in", config.classes + ch, d)
        for i, _ in enumerate(config.dilations[1:], start=1):
            conv_init(f"dec.layer{i}", d, d)
        for i in range(len(config.dilations)):
            params[f"dec.step{i}.w"] = _glorot(rng, (config.step_dim, d), config.step_dim, d)
            params[f"dec.step{i}.b"] = np.zeros((1, d))
        params["dec.head.w"] = _glorot(rng, (d, config.classes), d, config.classes)
        params["dec.head.b"] = np.zeros((1, config.classes))
        self.params = params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def bind(self, tape: Tape, trainable: bool = True) -> "BoundDenoiser":
        """Place the parameters on a tape, as leaves (training) or constants."""
        attach = tape.leaf if trainable else tape.const
        bound = {name: attach(arr, name=name) for name, arr in self.params.items()}
        return BoundDenoiser(self.config, tape, bound)


class BoundDenoiser:
    def __init__(self, config: DenoiserConfig, tape: Tape, bound: dict[str, Tensor]):
        self.config = config
        self.tape = tape
        self.bound = bound

    def _conv(self, name: str, x: Tensor, dilation: int) -> Tensor:
        return td.add(td.conv1d(x, self.bound[f"{name}.w"], dilation), self.bound[f"{name}.b"])

    def encode(self, features: np.ndarray) -> tuple[Tensor, Tensor]:
        """Features (L, D) -> (condition (L, channels), encoder probabilities (L, C))."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.config.feature_dim:
            raise ShapeError(
                f"features {features.shape} do not match feature_dim {self.config.feature_dim}"
            )
        if not np.all(np.isfinite(features)):
            raise ShapeError("non-finite features")
        h = td.relu(self._conv("enc.in", self.tape.const(features), self.config.dilations[0]))
        for i, dil in enumerate(self.config.dilations[1:], start=1):
            h = td.relu(h + self._conv(f"enc.layer{i}", h, dil))
        p_enc = td.softmax(
            td.add(td.matmul(h, self.bound["enc.head.w"]), self.bound["enc.head.b"])
        )
        return h, p_enc

    def decode(self, y_t: Tensor, condition: Tensor, t: int) -> tuple[Tensor, Tensor]:
        """(noisy signal (L, C), condition (L, channels), step) -> (embeddings, probabilities).

        The returned embeddings are the final layer's output before the
        classification head.
        """
        if y_t.value.shape[0] != condition.value.shape[0]:
            raise ShapeError(
                f"signal rows {y_t.value.shape[0]} vs condition rows {condition.value.shape[0]}"
            )
        if y_t.value.shape[1] != self.config.classes:
            raise ShapeError(f"signal {y_t.value.shape} does not match classes {self.config.classes}")
        step = self.tape.const(sinusoidal_step_embedding(t, self.config.step_dim))

        def step_bias(i: int) -> Tensor:
            return td.add(
                td.matmul(step, self.bound[f"dec.step{i}.w"]), self.bound[f"dec.step{i}.b"]
            )

        h = td.concat_cols(y_t, condition)
        h = td.relu(td.add(self._conv("dec.in", h, self.config.dilations[0]), step_bias(0)))
        for i, dil in enumerate(self.config.dilations[1:], start=1):
            h = td.relu(h + td.add(self._conv(f"dec.layer{i}", h, dil), step_bias(i)))
        probs = td.softmax(
            td.add(td.matmul(h, self.bound["dec.head.w"]), self.bound["dec.head.b"])
        )
        return h, probs


def mask_vector(
    kind: str,
    segments: list[Segment],
    length: int,
    rng: np.random.Generator,
    boundary_halfwidth: int = 2,
) -> np.ndarray:
    """(L, 1) keep-mask implementing one conditioning prior.

    none: all ones. position: all zeros. boundary: zeros within +/- w of each
    internal segment boundary (the first frame of every segment after the
    first). relation: zeros over one uniformly chosen segment; with no
    segments to choose from the mask falls back to none (logged).
    """
    if kind not in MASK_KINDS:
        raise ShapeError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")
    keep = np.ones((length, 1))
    if kind == "none":
        return keep
    if kind == "position":
        return np.zeros((length, 1))
    if kind == "boundary":
        for seg in segments[1:]:
            lo = max(seg.start - boundary_halfwidth, 0)
            hi = min(seg.start + boundary_halfwidth, length - 1)
            keep[lo : hi + 1] = 0.0
        return keep
    if not segments:
        logger.warning("relation mask with no segments; falling back to none")
        return keep
    seg = segments[int(rng.integers(0, len(segments)))]
    keep[seg.start : seg.end + 1] = 0.0
    return keep


def apply_masking(
    condition: Tensor,
    kind: str,
    segments: list[Segment],
    rng: np.random.Generator,
    boundary_halfwidth: int = 2,
) -> Tensor:
    """Zero rows of the condition per the chosen prior; labels/signals untouched."""
    if kind == "none":
        return condition
    keep = mask_vector(kind, segments, condition.value.shape[0], rng, boundary_halfwidth)
    return td.scale_rows(condition, condition.tape.const(keep))


def sample_mask_kind(rng: np.random.Generator) -> str:
    """Uniform draw over the four priors, one per training example."""
    return MASK_KINDS[int(rng.integers(0, len(MASK_KINDS)))]


def receptive_halfwidth(config: DenoiserConfig) -> int:
    """Frames reachable from one input frame through all encoder layers."""
    return sum(d * (config.kernel // 2) for d in config.dilations)
