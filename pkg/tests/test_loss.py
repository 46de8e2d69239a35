import math

import numpy as np
import pytest

from langloc import geometry
from langloc import numerics as nm
from langloc.loss import (
    DegenerateQuaternionError,
    LossError,
    LossWeights,
    PoseTarget,
    batch_loss,
    classification_loss,
    log_unit_quaternion,
    pose_loss,
)
from langloc.model import ForwardOutput
from langloc.numerics import GradientTape, Tensor, backward, rng_from_seed

from conftest import finite_difference_gradient, max_relative_error


def make_weights(alpha=-4.0, beta=-2.0):
    return LossWeights(
        alpha=Tensor(np.array(alpha), "alpha"), beta=Tensor(np.array(beta), "beta")
    )


def make_target(rng=None, scene=0):
    rng = rng or rng_from_seed(1)
    return PoseTarget(
        position=rng.uniform(0, 1, 3),
        quaternion=geometry.random_unit_quaternion(rng),
        scene_index=scene,
    )


def saturated_logits(k, k0, margin=800.0):
    z = np.zeros(k)
    z[k0] = margin
    return Tensor(z)


class TestClassificationLoss:
    def test_saturated_is_near_zero(self):
        z = np.zeros(5)
        z[2] = 30.0
        value = classification_loss(Tensor(z), 2).item()
        assert 0.0 <= value < 1e-9

    def test_uniform_logits_log_k(self):
        value = classification_loss(Tensor(np.zeros(7)), 3).item()
        assert abs(value - math.log(7)) < 1e-9
        assert abs(value - 1.945910) < 1e-6

    def test_shift_invariance(self):
        rng = rng_from_seed(2)
        z = rng.standard_normal(6) * 5
        base = classification_loss(Tensor(z), 4).item()
        for c in (-100.0, -1.0, 0.5, 1e3):
            shifted = classification_loss(Tensor(z + c), 4).item()
            assert abs(shifted - base) < 1e-12

    def test_nonnegative(self):
        rng = rng_from_seed(3)
        for _ in range(50):
            z = rng.standard_normal(4) * 10
            assert classification_loss(Tensor(z), int(rng.integers(4))).item() >= 0.0

    def test_index_out_of_range(self):
        with pytest.raises(LossError):
            classification_loss(Tensor(np.zeros(3)), 3)

    def test_gradient_is_softmax_minus_onehot(self):
        rng = rng_from_seed(4)
        z = Tensor(rng.standard_normal(5), "z")
        with GradientTape() as tape:
            value = classification_loss(z, 2)
        grads = backward(value, tape)
        probs = nm.softmax(z).data
        expected = probs.copy()
        expected[2] -= 1.0
        assert np.max(np.abs(grads[z] - expected)) < 1e-12


class TestLogUnitQuaternion:
    def test_matches_reference_map(self):
        rng = rng_from_seed(5)
        for _ in range(100):
            q = geometry.random_unit_quaternion(rng)
            tape_value = log_unit_quaternion(Tensor(q)).data
            assert np.max(np.abs(tape_value - geometry.quat_log(q))) < 1e-12

    def test_gradcheck(self):
        rng = rng_from_seed(6)
        q = Tensor(geometry.random_unit_quaternion(rng), "q")

        def build():
            return nm.sum(nm.abs(log_unit_quaternion(q) - Tensor([0.1, -0.2, 0.3])))

        with GradientTape() as tape:
            total = build()
        grads = backward(total, tape)
        numeric = finite_difference_gradient(build, q)
        assert max_relative_error(grads[q], numeric) < 1e-4


class TestPoseLoss:
    def test_zero_residuals_at_inits_is_minus_six(self):
        target = make_target()
        weights = make_weights(-4.0, -2.0)
        value = pose_loss(
            Tensor(target.position), Tensor(target.quaternion), target, weights,
            saturated_logits(3, 0),
        ).item()
        assert abs(value - (-6.0)) < 1e-12

    def test_unit_weights_reduce_to_l1_sums(self):
        rng = rng_from_seed(7)
        target = make_target(rng)
        p = Tensor(rng.uniform(0, 1, 3))
        q_raw = Tensor(rng.standard_normal(4))
        weights = make_weights(0.0, 0.0)
        value = pose_loss(p, q_raw, target, weights, saturated_logits(3, 0)).item()
        q = geometry.canonicalize_hemisphere(geometry.normalize(q_raw.data)[0])
        expected = float(
            np.abs(p.data - target.position).sum()
            + np.abs(geometry.quat_log(q) - geometry.quat_log(target.quaternion)).sum()
        )
        assert abs(value - expected) < 1e-12

    def test_alpha_gradient_is_one_at_zero_position_residual(self):
        rng = rng_from_seed(8)
        target = make_target(rng)
        weights = make_weights(-4.0, -2.0)
        with GradientTape() as tape:
            value = pose_loss(
                Tensor(target.position), Tensor(rng.standard_normal(4)), target,
                weights, saturated_logits(3, 0),
            )
        grads = backward(value, tape)
        assert float(grads[weights.alpha]) == 1.0

    def test_invariant_to_raw_quaternion_sign(self):
        rng = rng_from_seed(9)
        target = make_target(rng)
        weights = make_weights()
        q_raw = rng.standard_normal(4)
        p = Tensor(rng.uniform(0, 1, 3))
        a = pose_loss(p, Tensor(q_raw), target, weights, saturated_logits(3, 0)).item()
        b = pose_loss(p, Tensor(-q_raw), target, weights, saturated_logits(3, 0)).item()
        assert a == b

    def test_monotone_in_position_residual(self):
        rng = rng_from_seed(10)
        target = make_target(rng)
        weights = make_weights()
        q_raw = Tensor(rng.standard_normal(4))
        values = []
        for scale in (0.0, 0.1, 0.5, 1.0):
            p = Tensor(target.position + scale * np.array([1.0, -1.0, 0.5]))
            values.append(
                pose_loss(p, q_raw, target, weights, saturated_logits(3, 0)).item()
            )
        assert values == sorted(values)

    def test_degenerate_quaternion_rejected(self):
        target = make_target()
        with pytest.raises(DegenerateQuaternionError):
            pose_loss(
                Tensor(target.position), Tensor(np.zeros(4)), target, make_weights(),
                saturated_logits(3, 0),
            )

    def test_alpha_beta_gradients_match_finite_differences(self):
        rng = rng_from_seed(11)
        target = make_target(rng)
        weights = make_weights(-1.3, 0.4)
        p = Tensor(rng.uniform(0, 1, 3))
        q_raw = Tensor(rng.standard_normal(4))

        def build():
            return pose_loss(p, q_raw, target, weights, saturated_logits(3, 0))

        with GradientTape() as tape:
            total = build()
        grads = backward(total, tape)
        for t in (weights.alpha, weights.beta, p, q_raw):
            numeric = finite_difference_gradient(build, t)
            assert max_relative_error(grads[t], numeric) < 1e-4

    def test_stationary_alpha_is_log_residual(self):
        # minimizing r*e^-a + a over a alone lands at a* = ln r
        rng = rng_from_seed(12)
        target = make_target(rng)
        residual = 0.37
        p = Tensor(target.position + np.array([residual, 0.0, 0.0]))
        q_raw = Tensor(target.quaternion)
        weights = make_weights(alpha=0.0, beta=-2.0)
        alpha = weights.alpha
        for _ in range(400):
            with GradientTape() as tape:
                value = pose_loss(p, q_raw, target, weights, saturated_logits(3, 0))
            grads = backward(value, tape)
            alpha.assign(alpha.data - 0.05 * grads[alpha])
        assert abs(alpha.item() - math.log(residual)) < 1e-6


def _fake_output(logits, poses):
    return ForwardOutput(
        scene_logits=logits,
        scene_probs=nm.softmax(logits),
        poses=poses,
        selected_scene=int(np.argmax(logits.data)),
    )


class TestBatchLoss:
    def _outputs_and_targets(self, n, seed=13):
        rng = rng_from_seed(seed)
        outputs, targets = [], []
        for i in range(n):
            target = make_target(rng, scene=int(rng.integers(2)))
            poses = [
                (Tensor(rng.uniform(0, 1, 3)), Tensor(rng.standard_normal(4)))
                for _ in range(2)
            ]
            outputs.append(_fake_output(Tensor(rng.standard_normal(2)), poses))
            targets.append(target)
        return outputs, targets

    def test_identical_samples_equal_single(self):
        outputs, targets = self._outputs_and_targets(1)
        weights = make_weights()
        single = batch_loss(outputs, targets, weights).item()
        tripled = batch_loss(outputs * 3, targets * 3, weights).item()
        assert abs(single - tripled) < 1e-12

    def test_mean_matches_brute_force(self):
        outputs, targets = self._outputs_and_targets(5)
        weights = make_weights()
        total = batch_loss(outputs, targets, weights).item()
        per_sample = [
            pose_loss(
                o.poses[t.scene_index][0], o.poses[t.scene_index][1], t, weights,
                o.scene_logits,
            ).item()
            for o, t in zip(outputs, targets)
        ]
        assert abs(total - float(np.mean(per_sample))) < 1e-12

    def test_permutation_invariance(self):
        outputs, targets = self._outputs_and_targets(6)
        weights = make_weights()
        base = batch_loss(outputs, targets, weights).item()
        order = [3, 0, 5, 1, 4, 2]
        permuted = batch_loss(
            [outputs[i] for i in order], [targets[i] for i in order], weights
        ).item()
        assert abs(base - permuted) < 1e-12

    def test_degenerate_sample_named(self):
        outputs, targets = self._outputs_and_targets(3)
        outputs[1].poses[targets[1].scene_index] = (
            outputs[1].poses[targets[1].scene_index][0],
            Tensor(np.zeros(4)),
        )
        with pytest.raises(DegenerateQuaternionError, match="sample 1"):
            batch_loss(outputs, targets, make_weights())

    def test_empty_batch(self):
        with pytest.raises(LossError):
            batch_loss([], [], make_weights())


class TestPoseTarget:
    def test_rejects_non_canonical_quaternion(self):
        with pytest.raises(LossError):
            PoseTarget(np.zeros(3), np.array([-1.0, 0.0, 0.0, 0.0]), 0)

    def test_rejects_non_unit(self):
        with pytest.raises((LossError, geometry.GeometryError)):
            PoseTarget(np.zeros(3), np.array([2.0, 0.0, 0.0, 0.0]), 0)

    def test_rejects_negative_scene(self):
        with pytest.raises(LossError):
            PoseTarget(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]), -1)
