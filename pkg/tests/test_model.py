import numpy as np
import pytest

from langloc import checkpoint, data, loss, model
from langloc import numerics as nm
from langloc.model import (
    ConfigError,
    ModelConfig,
    ModelError,
    ModelParams,
    classify_scene,
    decoder_layer,
    encode_image,
    encode_text,
    final_feedforward,
    forward,
    fuse,
    parameter_count,
    regress_pose,
)
from langloc.numerics import GradientTape, Tensor, backward, rng_from_seed

from conftest import finite_difference_gradient, max_relative_error


def small_config(vocab_size=12, **kwargs):
    defaults = dict(
        channels=3, height=32, width=32, patch=8, d_model=16, n_heads=2,
        n_layers=2, n_scenes=2, vocab_size=vocab_size, max_caption_len=8,
        dropout=0.0,
    )
    defaults.update(kwargs)
    return ModelConfig(**defaults)


class TestModelConfig:
    def test_gamma_is_inverse_sqrt_width(self):
        cfg = small_config()
        assert cfg.gamma == 32 ** -0.5
        assert abs(ModelConfig(vocab_size=8).gamma - 0.0668153) < 1e-6

    @pytest.mark.parametrize("n", [1, 3, 5, 7, 9, 16])
    def test_rejects_bad_layer_counts(self, n):
        with pytest.raises(ConfigError, match="n_layers"):
            small_config(n_layers=n)

    @pytest.mark.parametrize("n", [2, 4, 6, 8])
    def test_accepts_ablation_layer_counts(self, n):
        assert small_config(n_layers=n).n_layers == n

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ConfigError, match="d_model"):
            small_config(d_model=20, n_heads=3)

    def test_rejects_bad_patch(self):
        with pytest.raises(ConfigError, match="patch"):
            small_config(patch=5)

    def test_rejects_bad_dropout(self):
        with pytest.raises(ConfigError, match="dropout"):
            small_config(dropout=1.0)

    def test_error_names_the_key(self):
        try:
            small_config(n_layers=3)
        except ConfigError as e:
            assert e.key == "n_layers"
            assert "n_layers" in str(e)


class TestParameterCount:
    @pytest.mark.parametrize("n", [2, 4, 6, 8])
    def test_closed_form_matches_actual(self, n):
        cfg = small_config(n_layers=n)
        params = ModelParams.init(cfg, seed=0)
        actual = sum(t.size for _, t in params.named_parameters())
        assert actual == parameter_count(cfg)

    def test_deterministic_init(self):
        cfg = small_config()
        a = ModelParams.init(cfg, seed=3)
        b = ModelParams.init(cfg, seed=3)
        for (na, ta), (_, tb) in zip(a.named_parameters(), b.named_parameters()):
            assert np.array_equal(ta.data, tb.data), na

    def test_loss_weight_inits(self):
        params = ModelParams.init(small_config(), seed=0)
        assert params.alpha.item() == -4.0
        assert params.beta.item() == -2.0


class TestPositionTables:
    def test_entries_bounded_by_one(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=0)
        assert np.max(np.abs(params.pos_visual)) <= 1.0
        assert np.max(np.abs(params.pos_text)) <= 1.0
        assert np.max(np.abs(cfg.gamma * params.pos_visual)) <= cfg.gamma

    def test_shapes(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=0)
        assert params.pos_visual.shape == (cfg.n_visual_tokens, cfg.d_model)
        assert params.pos_text.shape == (cfg.max_caption_len, cfg.d_model)


class TestEncodeImage:
    def test_token_count_224(self):
        cfg = ModelConfig(height=224, width=224, patch=16, d_model=8, n_heads=2,
                          n_layers=2, n_scenes=2, vocab_size=8, dropout=0.0)
        params = ModelParams.init(cfg, seed=0)
        out = encode_image(np.zeros((3, 224, 224)), params, cfg)
        assert out.shape == (196, 8)

    def test_zero_image_zero_bias_gives_scaled_table(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=0)
        out = encode_image(np.zeros((3, 32, 32)), params, cfg)
        assert np.array_equal(out.data, cfg.gamma * params.pos_visual)

    def test_shape_mismatch(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=0)
        with pytest.raises(ModelError):
            encode_image(np.zeros((3, 16, 32)), params, cfg)


class TestEncodeText:
    def test_row_count_matches_sequence(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=0)
        for n in (1, 3, cfg.max_caption_len):
            out = encode_text(np.arange(n) % cfg.vocab_size, params, cfg)
            assert out.shape == (n, cfg.d_model)

    def test_zero_embedding_gives_scaled_table(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=0)
        params.token_embedding.assign(np.zeros_like(params.token_embedding.data))
        out = encode_text(np.array([0, 1, 2]), params, cfg)
        assert np.array_equal(out.data, cfg.gamma * params.pos_text[:3])

    def test_out_of_vocab_id_rejected(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=0)
        with pytest.raises(ModelError, match="unknown"):
            encode_text(np.array([cfg.vocab_size]), params, cfg)

    def test_too_long_rejected(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=0)
        with pytest.raises(ModelError):
            encode_text(np.zeros(cfg.max_caption_len + 1, dtype=int), params, cfg)


class TestFuse:
    def test_zero_language_leaves_visual_unchanged(self):
        rng = rng_from_seed(1)
        visual = Tensor(rng.standard_normal((6, 8)))
        language = Tensor(np.zeros((3, 8)))
        joint, _ = fuse(visual, language)
        assert np.array_equal(joint.data[:6], visual.data)
        assert np.array_equal(joint.data[6:], language.data)

    def test_single_token_broadcasts(self):
        rng = rng_from_seed(2)
        visual = Tensor(rng.standard_normal((5, 8)))
        token = rng.standard_normal((1, 8))
        joint, attn = fuse(visual, Tensor(token))
        assert np.allclose(joint.data[:5], visual.data + token)
        assert np.array_equal(attn.data, np.ones((5, 1)))

    def test_rows_sum_to_one(self):
        rng = rng_from_seed(3)
        _, attn = fuse(Tensor(rng.standard_normal((7, 8))), Tensor(rng.standard_normal((4, 8))))
        assert np.max(np.abs(attn.data.sum(axis=1) - 1.0)) < 1e-9

    def test_width_mismatch(self):
        with pytest.raises(ModelError):
            fuse(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 6))))


def _zero_out_projections(params: ModelParams) -> None:
    for layer in params.layers:
        for attn in (layer.sa, layer.mha):
            attn.wo.assign(np.zeros_like(attn.wo.data))
            attn.bo.assign(np.zeros_like(attn.bo.data))


class TestDecoderLayer:
    def test_zeroed_output_projection_is_identity(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=1)
        _zero_out_projections(params)
        x = Tensor(rng_from_seed(4).standard_normal((10, cfg.d_model)))
        out, _, _ = decoder_layer(x, params.layers[0], cfg)
        assert np.array_equal(out.data, x.data)

    def test_shape_preserved_and_rows_normalized(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=2)
        x = Tensor(rng_from_seed(5).standard_normal((9, cfg.d_model)))
        out, sa_map, mha_map = decoder_layer(x, params.layers[0], cfg)
        assert out.shape == x.shape
        assert sa_map.shape == (1, 9, 9)
        assert mha_map.shape == (cfg.n_heads, 9, 9)
        for m in (sa_map, mha_map):
            assert np.max(np.abs(m.sum(axis=-1) - 1.0)) < 1e-9

    def test_full_stack_residual_identity(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=3)
        _zero_out_projections(params)
        params.ffn_w2.assign(np.zeros_like(params.ffn_w2.data))
        params.ffn_b2.assign(np.zeros_like(params.ffn_b2.data))
        x = Tensor(rng_from_seed(6).standard_normal((8, cfg.d_model)))
        y = x
        for layer in params.layers:
            y, _, _ = decoder_layer(y, layer, cfg)
        y = final_feedforward(y, params)
        assert np.array_equal(y.data, x.data)


class TestFinalFeedforward:
    def test_zero_second_weight_is_identity(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=4)
        params.ffn_w2.assign(np.zeros_like(params.ffn_w2.data))
        params.ffn_b2.assign(np.zeros_like(params.ffn_b2.data))
        x = Tensor(rng_from_seed(7).standard_normal((6, cfg.d_model)))
        assert np.array_equal(final_feedforward(x, params).data, x.data)

    def test_gradient_matches_finite_differences(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=5)
        x = Tensor(rng_from_seed(8).standard_normal((4, cfg.d_model)))

        def build():
            return nm.sum(nm.abs(final_feedforward(x, params)))

        with GradientTape() as tape:
            total = build()
        grads = backward(total, tape)
        for t in (params.ffn_w1, params.ffn_b1, params.ffn_w2, x):
            numeric = finite_difference_gradient(build, t)
            assert max_relative_error(grads[t], numeric) < 1e-4


class TestHeadsAndClassifier:
    def test_single_scene_softmax_is_one(self):
        cfg = small_config(n_scenes=1)
        params = ModelParams.init(cfg, seed=6)
        feats = Tensor(rng_from_seed(9).standard_normal((cfg.n_visual_tokens + 2, cfg.d_model)))
        logits = classify_scene(feats, params, cfg)
        assert nm.softmax(logits).data.tolist() == [1.0]

    def test_bias_shift_moves_all_logits(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=7)
        feats = Tensor(rng_from_seed(10).standard_normal((cfg.n_visual_tokens + 2, cfg.d_model)))
        base = classify_scene(feats, params, cfg).data
        params.cls_b.assign(params.cls_b.data + 1.5)
        shifted = classify_scene(feats, params, cfg).data
        assert np.allclose(shifted, base + 1.5)
        assert np.argmax(shifted) == np.argmax(base)

    def test_head_isolation(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=8)
        feats = Tensor(rng_from_seed(11).standard_normal((cfg.n_visual_tokens + 3, cfg.d_model)))
        before = regress_pose(feats, 0, params, cfg)
        params.heads[1].w1.assign(params.heads[1].w1.data + 10.0)
        params.heads[1].w2.assign(params.heads[1].w2.data - 5.0)
        after = regress_pose(feats, 0, params, cfg)
        assert np.array_equal(before[0].data, after[0].data)
        assert np.array_equal(before[1].data, after[1].data)

    def test_output_arity(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=9)
        feats = Tensor(rng_from_seed(12).standard_normal((cfg.n_visual_tokens + 1, cfg.d_model)))
        p, q_raw = regress_pose(feats, 1, params, cfg)
        assert p.shape == (3,)
        assert q_raw.shape == (4,)

    def test_scene_index_out_of_range(self):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=10)
        feats = Tensor(np.zeros((cfg.n_visual_tokens, cfg.d_model)))
        with pytest.raises(ModelError):
            regress_pose(feats, 2, params, cfg)

    def test_gradient_flows_only_into_routed_head(self, tiny_setup):
        catalog, cfg, _, samples = tiny_setup
        params = ModelParams.init(cfg, seed=11)
        weights = loss.LossWeights(alpha=params.alpha, beta=params.beta)
        batch = [s for s in samples if s.scene_index == 0][:1]
        targets = [loss.PoseTarget(s.pose.p, s.pose.q, s.scene_index) for s in batch]
        with GradientTape() as tape:
            outs = forward(batch, params, cfg, training=True, rng=rng_from_seed(1))
            total = loss.batch_loss(outs, targets, weights)
        grads = backward(total, tape)
        for tag, head in (("routed", params.heads[0]), ("other", params.heads[1])):
            for t in (head.w1, head.b1, head.w2, head.b2):
                if tag == "routed":
                    assert np.any(grads[t] != 0.0)
                else:
                    assert np.array_equal(grads[t], np.zeros_like(t.data))


class TestForward:
    def test_eval_determinism_bitwise(self, tiny_setup):
        _, cfg, _, samples = tiny_setup
        params = ModelParams.init(cfg, seed=12)
        a = forward(samples, params, cfg, training=False)
        b = forward(samples, params, cfg, training=False)
        for oa, ob in zip(a, b):
            assert np.array_equal(oa.scene_logits.data, ob.scene_logits.data)
            for (pa, qa), (pb, qb) in zip(oa.poses, ob.poses):
                assert np.array_equal(pa.data, pb.data)
                assert np.array_equal(qa.data, qb.data)

    def test_train_mode_fixed_seed_reproducible(self, tiny_setup):
        _, cfg, _, samples = tiny_setup
        params = ModelParams.init(cfg, seed=13)
        a = forward(samples, params, cfg, training=True, rng=rng_from_seed(5))
        b = forward(samples, params, cfg, training=True, rng=rng_from_seed(5))
        assert np.array_equal(a[0].scene_logits.data, b[0].scene_logits.data)

    def test_probs_equal_external_softmax(self, tiny_setup):
        _, cfg, _, samples = tiny_setup
        params = ModelParams.init(cfg, seed=14)
        out = forward(samples[:1], params, cfg)[0]
        assert np.array_equal(out.scene_probs.data, nm.softmax(out.scene_logits).data)

    def test_routing_train_vs_eval(self, tiny_setup):
        _, cfg, _, samples = tiny_setup
        params = ModelParams.init(cfg, seed=15)
        sample = samples[-1]
        trained = forward([sample], params, cfg, training=True, rng=rng_from_seed(2))[0]
        assert trained.selected_scene == sample.scene_index
        evaled = forward([sample], params, cfg, training=False)[0]
        assert evaled.selected_scene == int(np.argmax(evaled.scene_probs.data))

    def test_attention_maps_collected_on_request(self, tiny_setup):
        _, cfg, _, samples = tiny_setup
        params = ModelParams.init(cfg, seed=16)
        out = forward(samples[:1], params, cfg, collect_attention=True)[0]
        assert out.attention is not None
        assert len(out.attention.layers) == cfg.n_layers
        sa, mha = out.attention.layers[0]
        assert sa.shape[0] == 1
        assert mha.shape[0] == cfg.n_heads
        plain = forward(samples[:1], params, cfg)[0]
        assert plain.attention is None

    def test_error_names_sample_index(self, tiny_setup):
        _, cfg, _, samples = tiny_setup
        params = ModelParams.init(cfg, seed=17)
        import dataclasses
        bad = dataclasses.replace(samples[1], image=np.zeros((3, 8, 8)))
        with pytest.raises(ModelError, match="sample 1"):
            forward([samples[0], bad], params, cfg)

    def test_empty_batch_rejected(self, tiny_setup):
        _, cfg, _, _ = tiny_setup
        params = ModelParams.init(cfg, seed=18)
        with pytest.raises(ModelError):
            forward([], params, cfg)

    def test_training_dropout_needs_rng(self, tiny_setup):
        _, cfg, _, samples = tiny_setup
        params = ModelParams.init(cfg, seed=19)
        with pytest.raises(ModelError):
            forward(samples[:1], params, cfg, training=True)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tiny_setup, tmp_path):
        _, cfg, _, _ = tiny_setup
        params = ModelParams.init(cfg, seed=20)
        path = tmp_path / "model.bin"
        checkpoint.save(path, params, cfg)
        loaded, cfg2 = checkpoint.load(path)
        assert cfg2 == cfg
        for (name, a), (_, b) in zip(params.named_parameters(), loaded.named_parameters()):
            assert np.array_equal(a.data, b.data), name
        # byte-identical on re-save
        checkpoint.save(tmp_path / "again.bin", loaded, cfg2)
        assert (tmp_path / "model.bin").read_bytes() == (tmp_path / "again.bin").read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load(path)

    def test_truncated_file(self, tiny_setup, tmp_path):
        _, cfg, _, _ = tiny_setup
        params = ModelParams.init(cfg, seed=21)
        path = tmp_path / "model.bin"
        checkpoint.save(path, params, cfg)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load(path)
