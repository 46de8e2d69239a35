"""AdamW with decoupled decay, cosine schedule, training loop, evaluation.

The loop is deterministic end to end: batch order comes from a per-epoch
generator keyed (seed, 1, epoch), augmentation and dropout from a per-step
generator keyed (seed, 2, step), consumed in sample index order. Two runs
with the same seed, config, and dataset produce bitwise-identical loss logs
and checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as data_mod
from . import geometry
from .loss import LossWeights, PoseTarget, batch_loss, classification_loss
from .model import ModelConfig, ModelParams, forward
from .numerics import GradientTape, NumericsError, Tensor, backward, rng_from_seed


class TrainingError(ValueError):
    """Invalid training input or state."""


class DivergenceError(RuntimeError):
    """The loss or a parameter became non-finite; training aborted."""


LOSS_LOG_HEADER = "# langloc loss-log v1"
LOSS_LOG_COLUMNS = "# step\tlr\tloss\tl_cls\talpha\tbeta"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe; defaults are the published full-scale values."""

    lr0: float = 4.5e-5
    weight_decay: float = 4e-5
    batch_size: int = 64
    epochs: int = 280
    dropout: float = 0.5
    seed: int = 0
    eval_every: int = 100
    jitter_brightness: float = 0.6
    jitter_contrast: float = 0.7
    jitter_saturation: float = 0.7
    jitter_hue: float = 0.5
    crop_size: int = 224
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999

    def __post_init__(self):
        if self.lr0 <= 0:
            raise TrainingError(f"lr0 must be positive, got {self.lr0}")
        if self.weight_decay < 0:
            raise TrainingError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        for key in ("batch_size", "epochs", "eval_every", "crop_size"):
            if getattr(self, key) < 1:
                raise TrainingError(f"{key} must be positive, got {getattr(self, key)}")
        if not 0.0 <= self.dropout < 1.0:
            raise TrainingError(f"dropout must be in [0, 1), got {self.dropout}")
        for key in ("jitter_brightness", "jitter_contrast", "jitter_saturation", "jitter_hue"):
            if getattr(self, key) < 0:
                raise TrainingError(f"{key} must be nonnegative, got {getattr(self, key)}")
        for key in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise TrainingError(f"{key} must be in [0, 1), got {getattr(self, key)}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class OptimizerState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, named_params) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in named_params},
            v={name: np.zeros_like(t.data) for name, t in named_params},
        )


def adamw_step(named_params, grads, state: OptimizerState, lr: float,
               weight_decay: float, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8) -> None:
    """Bias-corrected Adam update plus decoupled decay w -= lr * wd * w.

    ``grads`` maps parameter tensors (by identity) to gradient arrays, as
    produced by :func:`langloc.numerics.backward`. A parameter with a zero
    gradient and zero moments only shrinks by the decay factor.
    """
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in named_params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter {name} {p.data.shape}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.assign(p.data - update - lr * weight_decay * p.data)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * step / total_steps)); no warmup."""
    if not 0 <= step <= total_steps:
        raise TrainingError(f"step {step} out of range [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    l_cls: float
    alpha: float
    beta: float

    def to_line(self) -> str:
        return "\t".join(
            [str(self.step)] + [repr(v) for v in (self.lr, self.loss, self.l_cls, self.alpha, self.beta)]
        )


@dataclass
class TrainResult:
    params: ModelParams
    config: ModelConfig
    records: list[StepRecord]
    checkpoint_path: Path | None
    loss_log_path: Path | None


def _augment(sample: data_mod.PoseSample, tc: TrainConfig,
             rng: np.random.Generator) -> data_mod.PoseSample:
    image = data_mod.color_jitter(
        sample.image, rng,
        brightness=tc.jitter_brightness, contrast=tc.jitter_contrast,
        saturation=tc.jitter_saturation, hue=tc.jitter_hue,
    )
    image = data_mod.crop(image, tc.crop_size, "random", rng)
    return replace(sample, image=image)


def _check_dataset(dataset, catalog) -> None:
    if not dataset:
        raise TrainingError("dataset is empty")
    k = len(catalog)
    bad = sorted({s.scene_index for s in dataset if not 0 <= s.scene_index < k})
    if bad:
        raise TrainingError(f"dataset references scenes missing from the catalog: {bad}")


def train(model_config: ModelConfig, train_config: TrainConfig, dataset,
          catalog: data_mod.SceneCatalog, out_dir=None) -> TrainResult:
    """Teacher-forced training over the multi-scene objective.

    Per step: seeded augmentation, train-mode forward routed through the
    ground-truth scene heads, batch loss, reverse sweep, AdamW with the
    cosine schedule. A non-finite value anywhere aborts with
    :class:`DivergenceError`. Writes the loss log and periodic checkpoints
    under ``out_dir`` when given; the final checkpoint is verified to round
    trip bit-exactly.
    """
    _check_dataset(dataset, catalog)
    params = ModelParams.init(model_config, train_config.seed)
    weights = LossWeights(alpha=params.alpha, beta=params.beta)
    named = params.named_parameters()
    opt = OptimizerState.init(named)

    n = len(dataset)
    steps_per_epoch = math.ceil(n / train_config.batch_size)
    total_steps = train_config.epochs * steps_per_epoch

    log_path = ckpt_latest = ckpt_final = None
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss_log.txt"
        ckpt_latest = out_dir / "checkpoint_latest.bin"
        ckpt_final = out_dir / "checkpoint_final.bin"
        log_file = log_path.open("w")
        log_file.write(LOSS_LOG_HEADER + "\n" + LOSS_LOG_COLUMNS + "\n")

    records: list[StepRecord] = []
    step = 0
    try:
        for epoch in range(train_config.epochs):
            order = rng_from_seed(train_config.seed, 1, epoch).permutation(n)
            for start in range(0, n, train_config.batch_size):
                chunk = order[start:start + train_config.batch_size]
                rng = rng_from_seed(train_config.seed, 2, step)
                lr = cosine_lr(step, total_steps, train_config.lr0)
                alpha_now = params.alpha.item()
                beta_now = params.beta.item()
                try:
                    batch = [_augment(dataset[i], train_config, rng) for i in chunk]
                    targets = [
                        PoseTarget(s.pose.p, s.pose.q, s.scene_index) for s in batch
                    ]
                    with GradientTape() as tape:
                        outputs = forward(batch, params, model_config, training=True, rng=rng)
                        total = batch_loss(outputs, targets, weights)
                    grads = backward(total, tape)
                    adamw_step(
                        named, grads, opt, lr, train_config.weight_decay,
                        betas=(train_config.adam_beta1, train_config.adam_beta2),
                    )
                except NumericsError as e:
                    raise DivergenceError(f"non-finite value at step {step}: {e}") from e
                l_cls = float(
                    np.mean(
                        [
                            classification_loss(o.scene_logits, t.scene_index).item()
                            for o, t in zip(outputs, targets)
                        ]
                    )
                )
                record = StepRecord(step, lr, total.item(), l_cls, alpha_now, beta_now)
                records.append(record)
                if log_file is not None:
                    log_file.write(record.to_line() + "\n")
                step += 1
                if ckpt_latest is not None and step % train_config.eval_every == 0:
                    ckpt.save(ckpt_latest, params, model_config)
    finally:
        if log_file is not None:
            log_file.close()

    if ckpt_final is not None:
        ckpt.save(ckpt_final, params, model_config)
        reloaded, _ = ckpt.load(ckpt_final)
        for (name, t), (_, t2) in zip(named, reloaded.named_parameters()):
            if not np.array_equal(t.data, t2.data):
                raise TrainingError(f"checkpoint round trip altered tensor {name!r}")
    return TrainResult(params, model_config, records, ckpt_final, log_path)


@dataclass
class SceneMetrics:
    name: str
    sample_count: int
    median_position_m: float
    median_rotation_deg: float
    accuracy: float


@dataclass
class MetricsReport:
    """Per-scene medians plus their arithmetic means (the table convention:
    the average row averages per-scene medians, it is not a pooled median)."""

    scenes: list[SceneMetrics]
    average_position_m: float
    average_rotation_deg: float
    accuracy: float
    sample_count: int


def _eval_image(sample: data_mod.PoseSample, config: ModelConfig) -> data_mod.PoseSample:
    shape = (config.channels, config.height, config.width)
    if sample.image.shape == shape:
        return sample
    if config.height != config.width:
        raise TrainingError(
            f"cannot center-crop to a non-square model input {config.height}x{config.width}"
        )
    return replace(sample, image=data_mod.crop(sample.image, config.height, "center"))


def evaluate(params: ModelParams, config: ModelConfig, dataset,
             catalog: data_mod.SceneCatalog, forward_fn=forward) -> MetricsReport:
    """Deterministic evaluation: center crop only, no jitter, no dropout,
    pose read from the argmax-probability head."""
    _check_dataset_eval(dataset, catalog)
    errors: dict[int, list[tuple[float, float, bool]]] = {s.index: [] for s in catalog}
    for sample in dataset:
        prepped = _eval_image(sample, config)
        out = forward_fn([prepped], params, config, training=False)[0]
        p_pred = out.poses[out.selected_scene][0].data
        q_raw = out.poses[out.selected_scene][1].data
        q_pred, _ = geometry.normalize(q_raw)
        q_pred = geometry.canonicalize_hemisphere(q_pred)
        errors[sample.scene_index].append(
            (
                geometry.position_error_m(p_pred, sample.pose.p),
                geometry.rotation_error_deg(q_pred, sample.pose.q),
                out.selected_scene == sample.scene_index,
            )
        )
    scenes = []
    for scene in catalog:
        rows = errors[scene.index]
        if not rows:
            continue
        scenes.append(
            SceneMetrics(
                name=scene.name,
                sample_count=len(rows),
                median_position_m=geometry.median([r[0] for r in rows]),
                median_rotation_deg=geometry.median([r[1] for r in rows]),
                accuracy=float(np.mean([r[2] for r in rows])),
            )
        )
    total = int(np.sum([s.sample_count for s in scenes]))
    hits = float(np.sum([s.accuracy * s.sample_count for s in scenes]))
    return MetricsReport(
        scenes=scenes,
        average_position_m=float(np.mean([s.median_position_m for s in scenes])),
        average_rotation_deg=float(np.mean([s.median_rotation_deg for s in scenes])),
        accuracy=hits / total,
        sample_count=total,
    )


def _check_dataset_eval(dataset, catalog) -> None:
    if not dataset:
        raise TrainingError("dataset is empty")
    k = len(catalog)
    bad = sorted({s.scene_index for s in dataset if not 0 <= s.scene_index < k})
    if bad:
        raise TrainingError(f"dataset holds scenes absent from the catalog: {bad}")


def evaluate_checkpoint(path, dataset, catalog: data_mod.SceneCatalog) -> MetricsReport:
    params, config = ckpt.load(path)
    return evaluate(params, config, dataset, catalog)
