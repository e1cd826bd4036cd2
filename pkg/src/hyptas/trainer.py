"""Two-phase training loop, prototype lifecycle, and single-video inference.

Per video per step: sample a diffusion timestep uniformly in [1, T], encode
features, apply one sampled conditioning mask, corrupt the encoded labels,
decode, assemble the phase loss, backpropagate, and take Adam steps with
gradients accumulated over `batch_size` videos. Prototypes train under
Riemannian Adam during the stabilization phase and freeze at epoch E1.
Everything is a deterministic function of (dataset, config): identical
seeds produce bit-identical checkpoints.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as td
from . import ballops as bo
from .autodiff import Tape
from .data import Dataset, RunConfig, read_checkpoint, write_checkpoint
from .diffusion import (
    NoiseSchedule,
    forward_corrupt,
    label_decode,
    label_encode,
    make_schedule,
    sample,
)
from .errors import ConfigError, FormatError, NonFiniteLossError, ShapeError
from .geometry import exp_map_origin_rows
from .losses import (
    LossWeights,
    Prototypes,
    cross_entropy,
    geodesic_guidance,
    phase_for_epoch,
    prototype_margin,
    push_pull,
    stabilization_total,
    guidance_total,
    temporal_entailment,
)
from .metrics import evaluate_videos, segments_from_labels
from .model import BoundDenoiser, Denoiser, DenoiserConfig, apply_masking, sample_mask_kind
from .optim import Adam, AdamConfig, RiemannianAdam

logger = logging.getLogger(__name__)

CHECKPOINT_FIELDS = ("feature_dim", "classes", "embed_dim", "encoder_channels",
                     "kernel", "step_dim", "boundary_halfwidth", "aux_head")


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    components: dict[str, float]
    total: float
    prototype_min_distance: float
    prototype_checksum: str
    metrics: dict[str, float] | None = None

    def format_line(self) -> str:
        parts = [f"epoch={self.epoch}", f"phase={self.phase}", f"total={self.total:.6f}"]
        parts += [f"{k}={v:.6f}" for k, v in self.components.items()]
        parts.append(f"proto_min={self.prototype_min_distance:.6f}")
        if self.metrics:
            parts += [f"{k.lower().replace('@', '_')}={v:.4f}" for k, v in self.metrics.items()]
        return " ".join(parts)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def phases(self) -> list[str]:
        return [r.phase for r in self.records]

    def format_lines(self) -> list[str]:
        return [r.format_line() for r in self.records]


@dataclass
class TrainedState:
    model: Denoiser
    prototypes: Prototypes
    schedule: NoiseSchedule
    config: RunConfig


def init_prototypes(classes: int, dim: int, curvature: float, seed: int) -> Prototypes:
    """Pairwise-distinct points in a small ball around the origin (norm <= 0.1)."""
    if classes < 2:
        raise ShapeError(f"need at least two classes, got {classes}")
    rng = np.random.default_rng(seed)
    while True:
        directions = rng.normal(size=(classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        radii = rng.uniform(0.02, 0.1, size=(classes, 1))
        points = directions * radii
        diff = points[:, None, :] - points[None, :, :]
        off_diag = np.linalg.norm(diff, axis=2)[~np.eye(classes, dtype=bool)]
        if np.all(off_diag > 1e-6):
            return Prototypes(points, curvature)


def _weights_from_config(config: RunConfig) -> LossWeights:
    return LossWeights(
        lam_ce=config.lambda_ce,
        lam_entail=config.lambda_entail,
        lam_margin=config.lambda_margin,
        lam_pp=config.lambda_pp,
        lam_gg=config.lambda_gg,
        margin=config.margin,
        cone_k=config.cone_k,
        decay=config.decay,
    )


def _denoiser_config(dataset: Dataset, config: RunConfig) -> DenoiserConfig:
    return DenoiserConfig(
        feature_dim=dataset.feature_dim,
        classes=dataset.num_classes,
        embed_dim=config.embed_dim,
        encoder_channels=config.encoder_channels,
        aux_head=config.aux_head,
    )


def _assemble_loss(
    bound: BoundDenoiser,
    video_labels: np.ndarray,
    probs,
    p_enc,
    ball,
    proto_tensor,
    phase: str,
    t: int,
    config: RunConfig,
    weights: LossWeights,
    frozen: bool,
):
    """Phase composite plus the per-component values for the log."""
    tape = probs.tape
    C = bound.config.classes
    y_onehot = np.eye(C)[video_labels]
    ce = cross_entropy(probs, y_onehot)
    if config.aux_head:
        ce = ce + cross_entropy(p_enc, y_onehot)
    components = {"ce": float(ce.value)}

    def entail():
        out = temporal_entailment(ball, weights.cone_k)
        components["entail"] = float(out.value)
        return out

    def margin():
        out = prototype_margin(proto_tensor, weights.margin, config.curvature)
        components["margin"] = float(out.value)
        return out

    def pp():
        assigned = td.gather_rows(proto_tensor, video_labels)
        out = push_pull(ball, assigned, t, config.timesteps, weights.decay, config.curvature)
        components["pp"] = float(out.value)
        return out

    def gg():
        assigned = td.gather_rows(proto_tensor, video_labels)
        out = geodesic_guidance(
            ball, assigned, config.curvature, frozen=frozen,
            allow_unfrozen=config.single_phase,
        )
        components["gg"] = float(out.value)
        return out

    zero = tape.const(np.zeros(()))
    if phase == "single":
        total = stabilization_total(
            ce,
            entail() if weights.lam_entail > 0 else zero,
            margin() if weights.lam_margin > 0 else zero,
            pp() if weights.lam_pp > 0 else zero,
            weights,
        )
        if weights.lam_gg > 0:
            total = total + td.mul(gg(), weights.lam_gg)
    elif phase == "stabilization":
        total = stabilization_total(
            ce,
            entail() if weights.lam_entail > 0 else zero,
            margin() if weights.lam_margin > 0 else zero,
            pp() if weights.lam_pp > 0 else zero,
            weights,
        )
    else:
        total = guidance_total(
            ce,
            entail() if weights.lam_entail > 0 else zero,
            gg() if weights.lam_gg > 0 else zero,
            weights,
        )
    for name, value in components.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(f"loss component {name!r} is non-finite at t={t}")
    if not math.isfinite(float(total.value)):
        raise NonFiniteLossError(f"total {phase} loss is non-finite at t={t}")
    return total, components


def train(dataset: Dataset, config: RunConfig) -> tuple[TrainedState, TrainLog]:
    if not dataset.train:
        raise ShapeError("training split is empty")
    if dataset.num_classes < 2:
        raise ShapeError("need at least two classes")

    model = Denoiser(_denoiser_config(dataset, config), seed=config.seed)
    prototypes = init_prototypes(
        dataset.num_classes, config.embed_dim, config.curvature, config.seed + 1
    )
    schedule = make_schedule(config.timesteps)
    weights = _weights_from_config(config)
    net_opt = Adam(model.params, AdamConfig(lr=config.lr))
    proto_opt = RiemannianAdam(prototypes, AdamConfig(lr=config.proto_lr))
    rng = np.random.default_rng(config.seed + 2)
    e1 = config.stabilization_epochs
    log = TrainLog()

    for epoch in range(config.epochs):
        phase = "single" if config.single_phase else phase_for_epoch(epoch, e1)
        if not config.single_phase and epoch >= e1 and not prototypes.frozen:
            prototypes.freeze()
            logger.info("prototypes frozen entering epoch %d", epoch)
        protos_trainable = config.single_phase or phase == "stabilization"

        order = rng.permutation(len(dataset.train))
        grad_sums = {name: np.zeros_like(p) for name, p in model.params.items()}
        proto_grad_sum = np.zeros_like(prototypes.points)
        pending = 0
        sums: dict[str, float] = {}
        total_sum = 0.0

        def flush():
            nonlocal pending, grad_sums, proto_grad_sum
            if pending == 0:
                return
            net_opt.step(model.params, {k: v / pending for k, v in grad_sums.items()})
            if protos_trainable:
                proto_opt.step(prototypes, proto_grad_sum / pending)
            grad_sums = {name: np.zeros_like(p) for name, p in model.params.items()}
            proto_grad_sum = np.zeros_like(prototypes.points)
            pending = 0

        for idx in order:
            video = dataset.train[idx]
            t = int(rng.integers(1, config.timesteps + 1))
            mask_kind = sample_mask_kind(rng)
            noise = rng.standard_normal((video.labels.shape[0], dataset.num_classes))

            tape = Tape()
            bound = model.bind(tape, trainable=True)
            condition, p_enc = bound.encode(video.features)
            segments = segments_from_labels(video.labels)
            masked = apply_masking(
                condition, mask_kind, segments, rng, model.config.boundary_halfwidth
            )
            x0 = label_encode(video.labels, dataset.num_classes)
            y_t = tape.const(forward_corrupt(x0, t, schedule, noise))
            emb, probs = bound.decode(y_t, masked, t)
            ball = bo.exp_map_origin_rows(emb, config.curvature)
            proto_tensor = (
                tape.leaf(prototypes.points) if protos_trainable
                else tape.const(prototypes.points)
            )
            total, components = _assemble_loss(
                bound, video.labels, probs, p_enc, ball, proto_tensor,
                phase, t, config, weights, prototypes.frozen,
            )
            grads = tape.backward(total)
            for name, tensor in bound.bound.items():
                grad_sums[name] += grads[tensor]
            if protos_trainable:
                proto_grad_sum += grads[proto_tensor]
            pending += 1
            if pending == config.batch_size:
                flush()
            total_sum += float(total.value)
            for k, v in components.items():
                sums[k] = sums.get(k, 0.0) + v
        flush()

        n = len(dataset.train)
        record = EpochRecord(
            epoch=epoch,
            phase=phase,
            components={k: v / n for k, v in sums.items()},
            total=total_sum / n,
            prototype_min_distance=prototypes.min_pairwise_distance(),
            prototype_checksum=_checksum(prototypes.points),
        )
        last = epoch == config.epochs - 1
        if dataset.test and ((epoch + 1) % config.eval_every == 0 or last):
            state = TrainedState(model, prototypes, schedule, config)
            pairs = []
            for i, rec in enumerate(dataset.test):
                pred, _, _ = infer_video(
                    state, rec.features, config.infer_steps,
                    seed=config.seed + 7919 * (epoch + 1) + i,
                )
                pairs.append((pred, rec.labels))
            record.metrics = evaluate_videos(pairs)
        log.records.append(record)
        logger.info("%s", record.format_line())

    return TrainedState(model, prototypes, schedule, config), log


def _checksum(arr: np.ndarray) -> str:
    import hashlib

    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


def infer_video(
    state: TrainedState,
    features: np.ndarray,
    steps: int | None = None,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unmasked condition, deterministic reverse pass.

    Returns (labels, per-frame probabilities, ball embeddings from the final
    denoiser call).
    """
    steps = state.config.infer_steps if steps is None else steps
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != state.model.config.feature_dim:
        raise ShapeError(
            f"features {features.shape} do not match checkpoint feature_dim "
            f"{state.model.config.feature_dim}"
        )
    cond_tape = Tape()
    cond_bound = state.model.bind(cond_tape, trainable=False)
    condition_value, _ = cond_bound.encode(features)
    condition_value = condition_value.value
    last_embedding: dict[str, np.ndarray] = {}

    def denoiser(y_t: np.ndarray, t: int) -> np.ndarray:
        tape = Tape()
        bound = state.model.bind(tape, trainable=False)
        emb, probs = bound.decode(tape.const(y_t), tape.const(condition_value), t)
        last_embedding["value"] = emb.value
        return probs.value

    probs = sample(
        denoiser, steps, state.schedule,
        (features.shape[0], state.model.config.classes), seed,
    )
    labels = label_decode(probs)
    ball = exp_map_origin_rows(last_embedding["value"], state.config.curvature)
    return labels, probs, ball


# ---------------------------------------------------------------------------
# Checkpoint schema
# ---------------------------------------------------------------------------

def save_checkpoint(
    state: TrainedState,
    path,
    net_opt: Adam | None = None,
    proto_opt: RiemannianAdam | None = None,
) -> None:
    cfg = state.model.config
    sections: list[tuple[str, object]] = [
        ("config_hash", state.config.hash()),
        ("config_text", state.config.canonical_text()),
        ("denoiser/meta", np.array(
            [getattr(cfg, f) if f != "aux_head" else float(cfg.aux_head)
             for f in CHECKPOINT_FIELDS], dtype=np.float64,
        )),
        ("denoiser/dilations", np.array(cfg.dilations, dtype=np.float64)),
        ("prototypes/points", state.prototypes.points),
        ("prototypes/frozen", np.array(float(state.prototypes.frozen))),
        ("prototypes/curvature", np.array(state.prototypes.curvature)),
        ("schedule/gamma", state.schedule.gamma),
    ]
    sections += [(f"param/{name}", arr) for name, arr in sorted(state.model.params.items())]
    if net_opt is not None:
        sections += [(f"optim/net/{k}", v) for k, v in net_opt.state_tensors().items()]
    if proto_opt is not None:
        sections += [(f"optim/proto/{k}", v) for k, v in proto_opt.state_tensors().items()]
    write_checkpoint(path, sections)


def load_checkpoint(path, expected_config: RunConfig | None = None) -> TrainedState:
    sections = read_checkpoint(path)
    try:
        meta = sections["denoiser/meta"]
        dilations = tuple(int(d) for d in sections["denoiser/dilations"])
        config_text = sections["config_text"]
    except KeyError as e:
        raise FormatError(f"{path}: missing checkpoint section {e}") from e

    values = dict(zip(CHECKPOINT_FIELDS, meta))
    den_cfg = DenoiserConfig(
        feature_dim=int(values["feature_dim"]),
        classes=int(values["classes"]),
        embed_dim=int(values["embed_dim"]),
        encoder_channels=int(values["encoder_channels"]),
        dilations=dilations,
        kernel=int(values["kernel"]),
        step_dim=int(values["step_dim"]),
        boundary_halfwidth=int(values["boundary_halfwidth"]),
        aux_head=bool(values["aux_head"]),
    )
    model = Denoiser(den_cfg, seed=0)
    for name in model.params:
        key = f"param/{name}"
        if key not in sections:
            raise FormatError(f"{path}: missing tensor {key!r}")
        stored = sections[key]
        if stored.shape != model.params[name].shape:
            raise FormatError(
                f"{path}: tensor {key!r} has shape {stored.shape}, "
                f"expected {model.params[name].shape}"
            )
        model.params[name] = stored

    prototypes = Prototypes(
        sections["prototypes/points"].copy(),
        float(sections["prototypes/curvature"]),
    )
    if bool(float(sections["prototypes/frozen"])):
        prototypes.freeze()
    schedule = NoiseSchedule(sections["schedule/gamma"])

    from .data import parse_config_text

    config_values = parse_config_text(config_text, source=f"{path}:config_text")
    try:
        run_config = RunConfig(**config_values)
    except (TypeError, ConfigError) as e:
        raise FormatError(f"{path}: stored config invalid: {e}") from e
    if expected_config is not None and expected_config.hash() != sections.get("config_hash"):
        logger.warning(
            "%s: checkpoint config hash %s does not match the requested config %s",
            path, sections.get("config_hash"), expected_config.hash(),
        )
    return TrainedState(model, prototypes, schedule, run_config)
