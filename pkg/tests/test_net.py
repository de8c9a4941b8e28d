"""Network assembly: encoder, fusion, heads, training loop, persistence."""

import numpy as np
import pytest

from gun import data as D
from gun import net
from gun.autodiff import OptimState, gradient_map, sgd_momentum_step, step_lr
from gun.errors import ConfigError, ShapeError, TrainingDivergedError
from gun.tensor import Tensor, softmax_cross_entropy


def toy_cfg(**kw):
    return net.ModelConfig(num_classes=5, **kw)


@pytest.fixture(scope="module")
def tiny_corpus():
    spec = D.SceneSpec(height=32, width=32, num_classes=3, shape_count=(3, 6))
    return D.build_corpus(spec, range(16))


class TestModelConfig:
    def test_factors_must_increase(self):
        with pytest.raises(ConfigError, match="increase"):
            toy_cfg(branch_factors=(4, 2))

    def test_factors_must_be_powers_of_two(self):
        with pytest.raises(ConfigError, match="powers"):
            toy_cfg(branch_factors=(2, 3))

    def test_gum_head_requires_guidance(self):
        with pytest.raises(ConfigError, match="guidance"):
            toy_cfg(upsample_head="gum-bilinear")

    def test_baseline_head_forbids_guidance(self):
        from gun.gum import GuidanceConfig
        with pytest.raises(ConfigError, match="forbids"):
            toy_cfg(guidance=GuidanceConfig(variant="high-res", early_channels=16))

    def test_classifier_width_per_fusion(self):
        assert toy_cfg(fusion="postproc-sum").classifier_in_channels == 32
        assert toy_cfg(fusion="base-sum").classifier_in_channels == 64
        assert toy_cfg(fusion="base-concat").classifier_in_channels == 128


class TestEncoder:
    def test_two_branch_shapes(self, rng):
        cfg = toy_cfg()
        params, state = net.init_model_params(cfg, seed=0)
        image = Tensor(rng.random((2, 3, 64, 64)))
        feats = net.encoder_forward(image, cfg, params, state)
        assert feats["fine"].shape == (2, 16, 16, 16)
        assert feats["coarse"].shape == (2, 64, 8, 8)
        assert feats["early"].shape == (2, 16, 32, 32)

    def test_three_branch_shapes(self, rng):
        cfg = toy_cfg(branch_factors=(1, 2, 4))
        params, state = net.init_model_params(cfg, seed=0)
        feats = net.encoder_forward(Tensor(rng.random((1, 3, 64, 64))), cfg,
                                    params, state)
        assert feats["finest"].shape == (1, 16, 32, 32)
        assert feats["fine"].shape == (1, 16, 16, 16)
        assert feats["coarse"].shape == (1, 64, 8, 8)
        assert feats["early"].shape == (1, 16, 64, 64)

    def test_indivisible_extents_rejected(self, rng):
        cfg = toy_cfg()
        params, state = net.init_model_params(cfg, seed=0)
        with pytest.raises(ShapeError, match="divisible"):
            net.encoder_forward(Tensor(rng.random((1, 3, 60, 60))), cfg, params, state)

    def test_shared_weight_count_equals_single_branch(self):
        shared, _ = net.init_model_params(toy_cfg(shared_weights=True), seed=0)
        unshared, _ = net.init_model_params(toy_cfg(shared_weights=False), seed=0)
        count = lambda p, pre: sum(v.data.size for k, v in p.items() if k.startswith(pre))
        assert count(shared, "enc.") == count(unshared, "enc.b1.")
        assert count(unshared, "enc.") > count(shared, "enc.")

    def test_shared_branches_are_same_storage(self, rng):
        cfg = toy_cfg()
        params, state = net.init_model_params(cfg, seed=0)
        image = Tensor(rng.random((1, 3, 64, 64)))
        loss = softmax_cross_entropy(
            net.gun_forward(image, cfg, params, state),
            rng.integers(0, 5, size=(1, 64, 64)))
        grads = gradient_map(loss, params)
        opt = OptimState.for_params(params)
        stem_id = id(params["enc.stem.conv.weight"].data)
        sgd_momentum_step(params, grads, opt, lr=0.1)
        # one storage serves every branch, before and after the step
        assert id(params["enc.stem.conv.weight"].data) == stem_id


class TestFusion:
    def test_postproc_sum_shape_chain(self, rng):
        cfg = toy_cfg(fusion="postproc-sum")
        params, state = net.init_model_params(cfg, seed=0)
        fine = Tensor(rng.random((2, 16, 16, 16)))
        coarse = Tensor(rng.random((2, 64, 8, 8)))
        fused = net.fusion_forward(coarse, fine, cfg, params, state)
        assert fused.shape == (2, 32, 16, 16)

    def test_base_concat_width(self, rng):
        cfg = toy_cfg(fusion="base-concat")
        params, state = net.init_model_params(cfg, seed=0)
        fused = net.fusion_forward(Tensor(rng.random((1, 64, 8, 8))),
                                   Tensor(rng.random((1, 16, 16, 16))),
                                   cfg, params, state)
        assert fused.shape == (1, 128, 16, 16)

    def test_zeroed_coarse_leaves_fine_path(self, rng):
        cfg = toy_cfg(fusion="base-sum")
        params, state = net.init_model_params(cfg, seed=0)
        fine = Tensor(rng.random((1, 16, 16, 16)))
        fused = net.fusion_forward(Tensor(np.zeros((1, 64, 8, 8))), fine,
                                   cfg, params, state)
        from gun.gum import conv_op
        np.testing.assert_array_equal(fused.data, conv_op(fine, params, "fusion.expand").data)

    def test_extent_mismatch_rejected(self, rng):
        cfg = toy_cfg()
        params, state = net.init_model_params(cfg, seed=0)
        with pytest.raises(ShapeError, match="half"):
            net.fusion_forward(Tensor(rng.random((1, 64, 8, 8))),
                               Tensor(rng.random((1, 16, 32, 32))),
                               cfg, params, state)


class TestForward:
    def test_baseline_logits_shape(self, rng):
        cfg = toy_cfg()
        params, state = net.init_model_params(cfg, seed=0)
        logits = net.gun_forward(Tensor(rng.random((2, 3, 64, 64))), cfg, params, state)
        assert logits.shape == (2, 5, 64, 64)

    @pytest.mark.parametrize("head", ["gum-bilinear", "gum-nearest"])
    def test_gum_head_shapes(self, head, rng):
        cfg = net.with_head(toy_cfg(), head, "fusion")
        params, state = net.init_model_params(cfg, seed=0)
        logits = net.gun_forward(Tensor(rng.random((1, 3, 64, 64))), cfg, params, state)
        assert logits.shape == (1, 5, 64, 64)

    def test_output_extents_follow_input(self, rng):
        cfg = toy_cfg()
        params, state = net.init_model_params(cfg, seed=0)
        for hw in (32, 64, 96):
            logits = net.gun_forward(Tensor(rng.random((1, 3, hw, hw))), cfg,
                                     params, state)
            assert logits.shape[2:] == (hw, hw)

    @pytest.mark.parametrize("variant", ["fusion", "high-res", "large-rf"])
    def test_zero_init_head_swap_identity(self, variant, rng):
        cfg_g = net.with_head(toy_cfg(), "gum-bilinear", variant)
        params, state = net.init_model_params(cfg_g, seed=11)
        image = Tensor(rng.random((2, 3, 64, 64)))
        base_params = {k: v for k, v in params.items() if not k.startswith("guidance")}
        lb = net.gun_forward(image, toy_cfg(), base_params, dict(state))
        lg = net.gun_forward(image, cfg_g, params, dict(state))
        assert np.abs(lb.data - lg.data).max() <= 1e-12

    def test_argmax_segmap_extents(self, rng):
        cfg = toy_cfg()
        params, state = net.init_model_params(cfg, seed=0)
        seg = net.predict(rng.random((3, 3, 64, 64)), cfg, params, state)
        assert seg.shape == (3, 64, 64)
        assert seg.dtype == np.uint8
        assert seg.max() < 5


class TestPipelineGradients:
    @pytest.mark.parametrize("head", ["gum-bilinear", "bilinear-baseline"])
    def test_miniature_full_model_fd(self, head):
        rep = net.pipeline_fd_check(seed=0, head=head)
        assert rep.ok
        assert rep.max_rel_error < 1e-3, rep.worst


class TestTraining:
    def test_deterministic_history(self, tiny_corpus):
        cfg = net.ModelConfig(num_classes=3, stem_channels=8, fine_channels=8,
                              coarse_channels=16, postproc_channels=8)
        recipe = net.TrainRecipe(epochs=2, batch_size=8, base_lr=0.1, seed=5)
        h1 = net.train(cfg, recipe, tiny_corpus, tiny_corpus).history
        h2 = net.train(cfg, recipe, tiny_corpus, tiny_corpus).history
        assert [(e.lr, e.train_loss, e.val_miou) for e in h1] == \
               [(e.lr, e.train_loss, e.val_miou) for e in h2]

    def test_history_lr_follows_step_policy(self, tiny_corpus):
        cfg = net.ModelConfig(num_classes=3, stem_channels=4, fine_channels=4,
                              coarse_channels=8, postproc_channels=4)
        recipe = net.TrainRecipe(epochs=3, batch_size=8, base_lr=0.05, seed=1)
        res = net.train(cfg, recipe, tiny_corpus, tiny_corpus)
        for stats in res.history:
            assert stats.lr == step_lr(stats.epoch, recipe.base_lr)

    def test_overfits_eight_scenes(self):
        spec = D.SceneSpec(height=32, width=32, num_classes=3, shape_count=(3, 5),
                           shape_kinds=("rectangle", "disk"), noise=0.05)
        corpus = D.build_corpus(spec, range(8))
        cfg = net.with_head(
            net.ModelConfig(num_classes=3, stem_channels=8, fine_channels=8,
                            coarse_channels=16, postproc_channels=8),
            "gum-bilinear", "fusion", hidden_channels=8)
        recipe = net.TrainRecipe(epochs=200, batch_size=8, base_lr=0.2, seed=0)
        res = net.train(cfg, recipe, corpus, corpus)
        assert res.history[-1].train_loss < 0.05

    def test_augmented_training_runs(self, tiny_corpus):
        cfg = net.ModelConfig(num_classes=3, stem_channels=4, fine_channels=4,
                              coarse_channels=8, postproc_channels=4)
        recipe = net.TrainRecipe(epochs=1, batch_size=8, base_lr=0.05, seed=1,
                                 augment="random-scale")
        res = net.train(cfg, recipe, tiny_corpus, tiny_corpus)
        assert np.isfinite(res.history[-1].train_loss)

    def test_nan_loss_aborts_with_diagnostics(self, tiny_corpus):
        corpus = D.Corpus(images=tiny_corpus.images.copy(),
                          gts=tiny_corpus.gts.copy())
        corpus.images[0, 0, 0, 0] = np.nan
        cfg = net.ModelConfig(num_classes=3, stem_channels=4, fine_channels=4,
                              coarse_channels=8, postproc_channels=4)
        recipe = net.TrainRecipe(epochs=1, batch_size=16, base_lr=0.05, seed=1)
        with pytest.raises(TrainingDivergedError, match="epoch 0"):
            net.train(cfg, recipe, corpus, corpus)

    def test_batch_larger_than_corpus_rejected(self, tiny_corpus):
        cfg = net.ModelConfig(num_classes=3)
        with pytest.raises(ConfigError, match="batch_size"):
            net.train(cfg, net.TrainRecipe(epochs=1, batch_size=99), tiny_corpus,
                      tiny_corpus)


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        cfg = net.with_head(toy_cfg(), "gum-bilinear", "fusion")
        params, state = net.init_model_params(cfg, seed=2)
        net.save_params(tmp_path / "params", params, state)
        params2, state2 = net.load_params(tmp_path / "params")
        assert set(params2) == set(params)
        for k in params:
            np.testing.assert_array_equal(params2[k].data, params[k].data)
        for k in state:
            np.testing.assert_array_equal(state2[k], state[k])
        net.check_params_match(cfg, params2, state2)

    def test_mismatch_lists_names(self, tmp_path):
        cfg = toy_cfg()
        params, state = net.init_model_params(cfg, seed=2)
        other = toy_cfg(coarse_channels=32)
        with pytest.raises(ConfigError, match="classifier"):
            net.check_params_match(other, params, state)
