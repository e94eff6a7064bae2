import copy

import numpy as np
import pytest
import torch

from sketchmatch.backbone import ConditionalDenoiser, ModelConfig, build_partition
from sketchmatch.diffusion import make_schedule
from sketchmatch.errors import DivergenceError
from sketchmatch.synthesis import style_captions
from sketchmatch.training import (
    DIFFUSION_TRAINABLE,
    WARMUP_TRAINABLE,
    AugmentPlan,
    FreezePolicy,
    TrainConfig,
    TrainTrace,
    apply_freeze_policy,
    augment,
    build_diffusion_data,
    draw_augment_plan,
    finetune_fr,
    run_training_phase,
    select_synthetic_identities,
    train_diffusion,
)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="batch_size"):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError, match="augment_p"):
            TrainConfig(augment_p=1.2)
        with pytest.raises(ValueError, match="synthetic_fraction"):
            TrainConfig(synthetic_fraction=0.0)
        with pytest.raises(ValueError, match="mix_ratio"):
            TrainConfig(mix_ratio=0.0)


class TestAugment:
    def _image(self, seed=0):
        rng = np.random.default_rng(seed)
        return rng.uniform(-0.8, 0.8, size=(1, 48, 48)).astype(np.float32)

    def test_p_zero_identity(self):
        img = self._image()
        np.testing.assert_array_equal(augment(img, 0.0, 123), img)

    def test_p_one_deterministic(self):
        img = self._image(1)
        a = augment(img, 1.0, 7)
        b = augment(img, 1.0, 7)
        np.testing.assert_array_equal(a, b)
        assert np.abs(a - img).max() > 0

    def test_output_range_and_shape(self):
        img = self._image(2)
        out = augment(img, 1.0, 3)
        assert out.shape == img.shape
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_firing_frequency_matches_p(self):
        draws = [draw_augment_plan(0.2, np.random.default_rng(k)) for k in range(10000)]
        for field in ("crop", "photometric", "blur"):
            rate = np.mean([getattr(d, field) for d in draws])
            assert abs(rate - 0.2) < 0.01

    def test_plan_independence(self):
        draws = [draw_augment_plan(0.5, np.random.default_rng(k)) for k in range(4000)]
        both = np.mean([d.crop and d.blur for d in draws])
        assert abs(both - 0.25) < 0.03  # independent Bernoullis

    def test_invalid_p(self):
        with pytest.raises(ValueError):
            augment(self._image(), -0.1, 0)


class TestFreezePolicy:
    def test_apply_sets_flags_exactly(self):
        model = ConditionalDenoiser(ModelConfig(seed=1))
        partition = build_partition(model)
        apply_freeze_policy(partition, FreezePolicy(DIFFUSION_TRAINABLE))
        assert partition.trainable == {
            "backbone": False, "text_attention": False,
            "image_attention": True, "projection": True, "control": True,
        }
        for name in ("backbone", "text_attention"):
            assert not any(p.requires_grad for p in partition.groups[name].values())
        for name in DIFFUSION_TRAINABLE:
            assert all(p.requires_grad for p in partition.groups[name].values())

    def test_unknown_group_rejected(self):
        model = ConditionalDenoiser(ModelConfig(seed=1))
        partition = build_partition(model)
        with pytest.raises(ValueError, match="unknown parameter groups"):
            apply_freeze_policy(partition, FreezePolicy(frozenset({"adapters"})))


@pytest.fixture(scope="module")
def tiny_diffusion_data(tiny_corpus, tiny_encoders):
    root, entries = tiny_corpus
    text_enc, sem_enc, ident_enc = tiny_encoders
    return build_diffusion_data(entries, root, text_enc, sem_enc, ident_enc, style_captions())


class TestDiffusionData:
    def test_pairs_cover_train_sketches(self, tiny_diffusion_data, tiny_corpus):
        _, entries = tiny_corpus
        n_train_sketches = sum(
            1 for e in entries if e.modality == "sketch" and e.split == "train"
        )
        assert len(tiny_diffusion_data) == n_train_sketches
        assert tiny_diffusion_data.targets.shape[1:] == (1, 48, 48)

    def test_conditions_share_identity_tensors(self, tiny_diffusion_data):
        # bundles of the same identity reuse one combined-embedding tensor
        by_ptr = {c.combined.data_ptr() for c in tiny_diffusion_data.conditions}
        assert len(by_ptr) < len(tiny_diffusion_data.conditions)


class TestTrainingPhases:
    def _setup(self, tiny_diffusion_data, seed=0):
        model = ConditionalDenoiser(ModelConfig(seed=seed))
        partition = build_partition(model)
        schedule = make_schedule(50)
        config = TrainConfig(batch_size=8, epochs=2, lr=1e-3, seed=seed)
        return model, partition, schedule, config

    def test_adapter_phase_freezes_backbone_bytes(self, tiny_diffusion_data):
        model, partition, schedule, config = self._setup(tiny_diffusion_data)
        before = {g: partition.group_bytes(g) for g in partition.groups}
        run_training_phase(
            model, partition, FreezePolicy(DIFFUSION_TRAINABLE), tiny_diffusion_data,
            schedule, config, phase="adapter", epochs=1, trace=TrainTrace(), max_steps=10,
        )
        assert partition.group_bytes("backbone") == before["backbone"]
        assert partition.group_bytes("text_attention") == before["text_attention"]
        for group in DIFFUSION_TRAINABLE:
            assert partition.group_bytes(group) != before[group]

    def test_warmup_phase_touches_only_backbone_groups(self, tiny_diffusion_data):
        model, partition, schedule, config = self._setup(tiny_diffusion_data, seed=1)
        before = {g: partition.group_bytes(g) for g in partition.groups}
        run_training_phase(
            model, partition, FreezePolicy(WARMUP_TRAINABLE), tiny_diffusion_data,
            schedule, config, phase="warmup", epochs=1, trace=TrainTrace(), max_steps=6,
        )
        for group in WARMUP_TRAINABLE:
            assert partition.group_bytes(group) != before[group]
        for group in DIFFUSION_TRAINABLE:
            assert partition.group_bytes(group) == before[group]

    def test_empty_policy_is_noop(self, tiny_diffusion_data):
        model, partition, schedule, config = self._setup(tiny_diffusion_data, seed=2)
        before = {g: partition.group_bytes(g) for g in partition.groups}
        run_training_phase(
            model, partition, FreezePolicy(frozenset()), tiny_diffusion_data,
            schedule, config, phase="noop", epochs=1, trace=TrainTrace(),
        )
        assert {g: partition.group_bytes(g) for g in partition.groups} == before

    def test_short_run_bit_reproducible(self, tiny_diffusion_data):
        outs = []
        for _ in range(2):
            model, partition, schedule, config = self._setup(tiny_diffusion_data, seed=3)
            run_training_phase(
                model, partition, FreezePolicy(DIFFUSION_TRAINABLE), tiny_diffusion_data,
                schedule, config, phase="adapter", epochs=1, trace=TrainTrace(), max_steps=10,
            )
            outs.append(b"".join(partition.group_bytes(g) for g in sorted(partition.groups)))
        assert outs[0] == outs[1]

    def test_gradients_absent_for_frozen_groups_after_step(self, tiny_diffusion_data):
        model, partition, schedule, config = self._setup(tiny_diffusion_data, seed=4)
        run_training_phase(
            model, partition, FreezePolicy(DIFFUSION_TRAINABLE), tiny_diffusion_data,
            schedule, config, phase="adapter", epochs=1, trace=TrainTrace(), max_steps=1,
        )
        for group in ("backbone", "text_attention"):
            assert all(p.grad is None for p in partition.groups[group].values())

    def test_divergence_guard(self, tiny_diffusion_data):
        model, partition, schedule, _ = self._setup(tiny_diffusion_data, seed=5)
        config = TrainConfig(batch_size=8, epochs=6, lr=50.0, seed=5)  # absurd lr
        with pytest.raises(DivergenceError):
            run_training_phase(
                model, partition, FreezePolicy(WARMUP_TRAINABLE), tiny_diffusion_data,
                schedule, config, phase="warmup", epochs=6, trace=TrainTrace(),
            )

    def test_train_diffusion_checkpoints_best(self, tiny_diffusion_data, tmp_path):
        model = ConditionalDenoiser(ModelConfig(seed=6))
        schedule = make_schedule(50)
        config = TrainConfig(batch_size=16, epochs=2, warmup_epochs=1, lr=1e-3, seed=6)
        result = train_diffusion(config, tiny_diffusion_data, model, schedule,
                                 checkpoint_path=tmp_path / "ckpt.pt")
        assert (tmp_path / "ckpt.pt").exists()
        assert result.best_loss < 10.0
        phases = {r["phase"] for r in result.trace.rows}
        assert phases == {"warmup", "adapter"}
        loaded = ConditionalDenoiser.load(tmp_path / "ckpt.pt")
        assert sum(p.numel() for p in loaded.parameters()) == sum(
            p.numel() for p in model.parameters()
        )


class TestSyntheticSelection:
    def test_floor_arithmetic(self):
        ids = list(range(10))
        assert len(select_synthetic_identities(ids, 1.0, seed=0)) == 10
        assert len(select_synthetic_identities(ids, 0.25, seed=0)) == 2
        assert len(select_synthetic_identities(ids, 0.39, seed=0)) == 3

    def test_nested_prefixes_for_fixed_seed(self):
        ids = list(range(40))
        small = set(select_synthetic_identities(ids, 0.25, seed=3))
        large = set(select_synthetic_identities(ids, 0.75, seed=3))
        assert small <= large

    def test_zero_selection_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            select_synthetic_identities([1, 2], 0.1, seed=0)


class TestFinetune:
    def _data(self, tiny_corpus):
        from sketchmatch.manifest import filter_entries
        from sketchmatch.training import load_images

        root, entries = tiny_corpus
        photos = filter_entries(entries, modality="photo", split="train")
        sketches = filter_entries(entries, modality="sketch", split="train")
        return (
            load_images(photos, root), np.array([e.id for e in photos]),
            load_images(sketches, root), np.array([e.id for e in sketches]),
        )

    def test_finetune_changes_parameters(self, tiny_encoders, tiny_corpus):
        _, _, ident_enc = tiny_encoders
        rp, rl, sp, sl = self._data(tiny_corpus)
        cfg = TrainConfig(batch_size=16, epochs=1, lr=1e-4, seed=0, augment_p=0.2)
        result = finetune_fr(ident_enc, rp, rl, sp, sl, cfg)
        assert result.encoder.param_hash() != ident_enc.param_hash()
        assert len(result.history) == 1

    def test_finetune_deterministic(self, tiny_encoders, tiny_corpus):
        _, _, ident_enc = tiny_encoders
        rp, rl, sp, sl = self._data(tiny_corpus)
        cfg = TrainConfig(batch_size=16, epochs=1, lr=1e-4, seed=9, augment_p=0.2)
        a = finetune_fr(ident_enc, rp, rl, sp, sl, cfg)
        b = finetune_fr(ident_enc, rp, rl, sp, sl, cfg)
        assert a.encoder.param_hash() == b.encoder.param_hash()

    def test_fraction_limits_identities(self, tiny_encoders, tiny_corpus):
        _, _, ident_enc = tiny_encoders
        rp, rl, sp, sl = self._data(tiny_corpus)
        cfg = TrainConfig(batch_size=16, epochs=1, lr=1e-4, seed=0,
                          synthetic_fraction=0.5, augment_p=0.0)
        result = finetune_fr(ident_enc, rp, rl, sp, sl, cfg)
        assert len(result.selected_identities) == len(set(sl)) // 2

    def test_unfitted_encoder_rejected(self, tiny_corpus):
        from sketchmatch.encoders import IdentityEncoder

        rp, rl, sp, sl = self._data(tiny_corpus)
        with pytest.raises(ValueError, match="fitted"):
            finetune_fr(IdentityEncoder(), rp, rl, sp, sl, TrainConfig())
