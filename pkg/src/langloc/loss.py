"""Training objective: homoscedastic pose loss plus scene classification.

Per sample, with learnable log-variance scalars alpha (position) and beta
(orientation):

    L = |p - p_hat|_1 * e^-alpha + alpha
      + |log q - log q_hat|_1 * e^-beta + beta
      + L_cls

where q is the predicted raw quaternion after normalization and hemisphere
canonicalization, log is the unit-quaternion logarithm, and L_cls is the
negative log likelihood of the true scene computed with the log-sum-exp
trick. The batch objective is the arithmetic mean over samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from . import numerics as nm
from .numerics import Tensor


class LossError(ValueError):
    """Invalid loss input (bad scene index, degenerate quaternion, ...)."""


class DegenerateQuaternionError(LossError):
    """Predicted quaternion norm below 1e-12; the log map is undefined."""


@dataclass
class LossWeights:
    """The two learnable balance scalars; both live on the gradient tape."""

    alpha: Tensor
    beta: Tensor


@dataclass
class PoseTarget:
    """Ground truth for one sample."""

    position: np.ndarray
    quaternion: np.ndarray  # unit, hemisphere-canonical
    scene_index: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.position.shape != (3,):
            raise LossError(f"target position must be a 3-vector, got {self.position.shape}")
        q = geometry.canonicalize_hemisphere(self.quaternion)
        if not np.array_equal(q, np.asarray(self.quaternion, dtype=np.float64)):
            raise LossError("target quaternion must be unit norm and hemisphere-canonical")
        self.quaternion = q
        if self.scene_index < 0:
            raise LossError(f"scene index must be nonnegative, got {self.scene_index}")


def classification_loss(logits: Tensor, true_scene: int) -> Tensor:
    """-log softmax(logits)[true_scene] via log-sum-exp (never materializes
    the probabilities), so it is exactly invariant to constant logit shifts
    up to rounding."""
    z = nm.reshape(logits, (logits.size,))
    if not 0 <= true_scene < z.size:
        raise LossError(f"scene index {true_scene} out of range [0, {z.size})")
    shift = float(z.data.max())
    lse = nm.log(nm.sum(nm.exp(z - shift))) + shift
    return lse - nm.sum(nm.narrow(z, 0, true_scene, true_scene + 1))


def log_unit_quaternion(q: Tensor) -> Tensor:
    """Differentiable unit-quaternion logarithm (same map and small-angle
    branch as :func:`langloc.geometry.quat_log`)."""
    w = nm.narrow(q, 0, 0, 1)
    v = nm.narrow(q, 0, 1, 4)
    s_value = float(np.linalg.norm(v.data))
    if s_value <= 1e-8:
        return v
    s = nm.sqrt(nm.sum(v * v))
    return v * (nm.atan2(s, nm.sum(w)) / s)


def pose_loss(pred_position: Tensor, pred_quaternion_raw: Tensor, target: PoseTarget,
              weights: LossWeights, logits: Tensor) -> Tensor:
    """Single-sample combined objective; differentiable in the prediction,
    the logits, and both balance scalars."""
    p = nm.reshape(pred_position, (3,))
    q_raw = nm.reshape(pred_quaternion_raw, (4,))
    norm_value = float(np.linalg.norm(q_raw.data))
    if norm_value < 1e-12:
        raise DegenerateQuaternionError(
            f"predicted quaternion norm {norm_value} is below 1e-12"
        )
    q_unit = q_raw / nm.sqrt(nm.sum(q_raw * q_raw))
    q = q_unit * geometry.canonical_sign(q_unit.data)

    pos_residual = nm.sum(nm.abs(p - Tensor(target.position)))
    rot_residual = nm.sum(
        nm.abs(log_unit_quaternion(q) - Tensor(geometry.quat_log(target.quaternion)))
    )
    return (
        pos_residual * nm.exp(-weights.alpha) + weights.alpha
        + rot_residual * nm.exp(-weights.beta) + weights.beta
        + classification_loss(logits, target.scene_index)
    )


def batch_loss(outputs, targets, weights: LossWeights) -> Tensor:
    """Arithmetic mean of per-sample losses, routing each prediction through
    the sample's ground-truth scene head. Errors name the failing sample."""
    if not len(outputs):
        raise LossError("batch_loss over an empty batch")
    if len(outputs) != len(targets):
        raise LossError(f"{len(outputs)} outputs vs {len(targets)} targets")
    total = None
    for i, (output, target) in enumerate(zip(outputs, targets)):
        if not 0 <= target.scene_index < len(output.poses):
            raise LossError(
                f"sample {i}: scene index {target.scene_index} out of range "
                f"[0, {len(output.poses)})"
            )
        p, q_raw = output.poses[target.scene_index]
        try:
            sample_loss = pose_loss(p, q_raw, target, weights, output.scene_logits)
        except DegenerateQuaternionError as e:
            raise DegenerateQuaternionError(f"sample {i}: {e}") from e
        total = sample_loss if total is None else total + sample_loss
    return total / float(len(outputs))
