import numpy as np
import pytest
import torch

from sketchmatch.backbone import (
    ConditionalDenoiser,
    DecoupledCrossAttention,
    ModelConfig,
    ParamPartition,
    ProjectionNetwork,
    build_partition,
    control_apply,
    sinusoidal_embedding,
)
from sketchmatch.diffusion import torch_generator
from sketchmatch.encoders import ConditionBundle, TextEmbedding, tokenize


def make_bundle(gen, *, image_size=48, context_dim=64, combined_dim=96, edge=None):
    ids, mask = tokenize("a hand-drawn sketch of a face")
    text = TextEmbedding(
        tokens=ids,
        vectors=torch.randn(len(ids), context_dim, generator=gen),
        mask=torch.tensor(mask),
    )
    if edge is None:
        edge = (torch.rand(1, image_size, image_size, generator=gen) > 0.9).float()
    return ConditionBundle(text=text, combined=torch.randn(combined_dim, generator=gen), edge_map=edge)


@pytest.fixture(scope="module")
def model():
    return ConditionalDenoiser(ModelConfig(seed=3))


class TestPartition:
    def test_groups_are_exhaustive_and_disjoint(self, model):
        partition = build_partition(model)  # check_exhaustive runs inside
        assert partition.total() == sum(p.numel() for p in model.parameters())
        assert set(partition.groups) == {
            "backbone", "text_attention", "image_attention", "projection", "control"
        }
        assert all(n > 0 for n in partition.sizes().values())

    def test_duplicate_assignment_detected(self, model):
        partition = build_partition(model)
        name, param = next(iter(partition.groups["projection"].items()))
        partition.groups["backbone"][name] = param
        with pytest.raises(ValueError, match="both"):
            partition.check_exhaustive(model)

    def test_zero_init_names_are_zero(self, model):
        params = dict(model.named_parameters())
        for name in model.zero_init_names():
            assert float(params[name].abs().max()) == 0.0, name

    def test_image_attention_group_is_the_adapter(self, model):
        names = set(build_partition(model).groups["image_attention"])
        assert all(("to_k_image" in n or "to_v_image" in n or "to_out_image" in n) for n in names)


class TestDecoupledAttention:
    def test_lambda_zero_equals_text_only_path(self):
        gen = torch_generator(0)
        attn = DecoupledCrossAttention(32, 64)
        for p in attn.parameters():  # give the image branch real weight
            p.data = torch.randn(p.shape, generator=gen) * 0.2
        h = torch.randn(2, 32, 6, 6, generator=gen)
        text = torch.randn(2, 8, 64, generator=gen)
        mask = torch.ones(2, 8, dtype=torch.bool)
        tok_a = torch.randn(2, 4, 64, generator=gen)
        tok_b = torch.randn(2, 4, 64, generator=gen)

        attn.lambda_image = 0.0
        out_a = attn(h, text, mask, tok_a)
        out_b = attn(h, text, mask, tok_b)
        assert float((out_a - out_b).abs().max()) < 1e-6

        zeroed = DecoupledCrossAttention(32, 64)
        zeroed.load_state_dict(attn.state_dict())
        zeroed.lambda_image = 1.0
        with torch.no_grad():
            zeroed.to_out_image.weight.zero_()
            zeroed.to_out_image.bias.zero_()
        assert float((zeroed(h, text, mask, tok_a) - out_a).abs().max()) < 1e-6

    def test_zero_init_image_branch_contributes_nothing(self):
        gen = torch_generator(1)
        attn = DecoupledCrossAttention(32, 64)
        h = torch.randn(1, 32, 4, 4, generator=gen)
        text = torch.randn(1, 8, 64, generator=gen)
        mask = torch.ones(1, 8, dtype=torch.bool)
        out_a = attn(h, text, mask, torch.randn(1, 4, 64, generator=gen))
        out_b = attn(h, text, mask, torch.randn(1, 4, 64, generator=gen))
        assert torch.equal(out_a, out_b)

    def test_attention_rows_sum_to_one_vs_oracle(self):
        gen = torch_generator(2)
        attn = DecoupledCrossAttention(32, 64)
        for p in attn.parameters():
            p.data = torch.randn(p.shape, generator=gen) * 0.3
        h = torch.randn(2, 32, 5, 5, generator=gen)
        text = torch.randn(2, 8, 64, generator=gen)
        mask = torch.tensor([[True] * 5 + [False] * 3, [True] * 8])
        tokens = torch.randn(2, 4, 64, generator=gen)
        with torch.no_grad():
            _, text_w, img_w = attn(h, text, mask, tokens, return_weights=True)
        for w in (text_w, img_w):
            sums = w.sum(dim=-1)
            assert float((sums - 1).abs().max()) < 1e-6
        assert float(text_w[0, :, 5:].abs().max()) == 0.0  # masked positions

        # direct exponent-sum oracle on the same projections
        with torch.no_grad():
            tokens_h = attn.norm(h).flatten(2).transpose(1, 2)
            q = attn.to_q(tokens_h)
            k = attn.to_k_text(text)
            scores = (q @ k.transpose(-1, -2) / np.sqrt(32)).numpy()
            scores[~mask[:, None, :].expand_as(torch.from_numpy(scores)).numpy()] = -np.inf
            e = np.exp(scores)
            oracle = e / e.sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(text_w.numpy(), oracle, atol=1e-6)

    def test_empty_context_rejected(self):
        attn = DecoupledCrossAttention(32, 64)
        h = torch.zeros(1, 32, 4, 4)
        with pytest.raises(ValueError, match="non-empty"):
            attn(h, torch.zeros(1, 0, 64), torch.zeros(1, 0, dtype=torch.bool), torch.zeros(1, 4, 64))

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError, match="lambda"):
            DecoupledCrossAttention(32, 64, lambda_image=-0.5)


class TestControlBranch:
    def test_residuals_zero_at_init_for_any_edge_map(self, model):
        gen = torch_generator(4)
        edges = (torch.rand(3, 1, 48, 48, generator=gen) > 0.8).float()
        for r in control_apply(edges, model.control):
            assert float(r.abs().max()) == 0.0

    def test_deterministic_on_zero_input(self, model):
        z = torch.zeros(1, 1, 48, 48)
        a = control_apply(z, model.control)
        b = control_apply(z, model.control)
        for x, y in zip(a, b):
            assert torch.equal(x, y)

    def test_stage_shapes(self, model):
        r0, r1, r2 = control_apply(torch.zeros(2, 1, 48, 48), model.control)
        assert r0.shape == (2, 16, 48, 48)
        assert r1.shape == (2, 32, 24, 24)
        assert r2.shape == (2, 64, 12, 12)

    def test_bad_shape_rejected(self, model):
        with pytest.raises(ValueError, match="edge maps"):
            control_apply(torch.zeros(2, 48, 48), model.control)


class TestProjection:
    def test_zero_weights_give_zero_tokens(self):
        proj = ProjectionNetwork(96, 128, 4, 64)
        with torch.no_grad():
            for p in proj.parameters():
                p.zero_()
        out = proj(torch.randn(3, 96, generator=torch_generator(5)))
        assert float(out.abs().max()) == 0.0
        assert out.shape == (3, 4, 64)


class TestDenoiserForward:
    def test_output_shape_and_determinism(self, model):
        gen = torch_generator(6)
        cond = make_bundle(gen)
        x = torch.randn(2, 1, 48, 48, generator=gen)
        t = torch.tensor([3, 170])
        a = model(x, t, [cond, cond])
        b = model(x, t, [cond, cond])
        assert a.shape == x.shape
        assert torch.equal(a, b)

    def test_edge_map_has_exactly_zero_effect_at_init(self, model):
        gen = torch_generator(7)
        cond_a = make_bundle(gen)
        cond_b = ConditionBundle(
            text=cond_a.text, combined=cond_a.combined,
            edge_map=torch.ones(1, 48, 48),
        )
        x = torch.randn(1, 1, 48, 48, generator=gen)
        t = torch.tensor([11])
        assert torch.equal(model(x, t, [cond_a]), model(x, t, [cond_b]))

    def test_condition_count_checked(self, model):
        gen = torch_generator(8)
        cond = make_bundle(gen)
        with pytest.raises(ValueError, match="conditions"):
            model(torch.zeros(2, 1, 48, 48), torch.tensor([0, 0]), [cond])

    def test_lambda_zero_on_full_model(self):
        gen = torch_generator(9)
        m = ConditionalDenoiser(ModelConfig(seed=5))
        with torch.no_grad():  # pretend the adapter was trained
            for blk in (m.attn2, m.attn3):
                blk.to_out_image.weight.normal_(0, 0.1, generator=gen)
        cond_a = make_bundle(gen)
        cond_b = ConditionBundle(
            text=cond_a.text, combined=torch.randn(96, generator=gen), edge_map=cond_a.edge_map
        )
        x = torch.randn(1, 1, 48, 48, generator=gen)
        t = torch.tensor([40])
        assert not torch.equal(m(x, t, [cond_a]), m(x, t, [cond_b]))
        m.set_lambda(0.0)
        assert float((m(x, t, [cond_a]) - m(x, t, [cond_b])).abs().max()) < 1e-6


class TestPersistence:
    def test_save_load_round_trip(self, model, tmp_path):
        path = tmp_path / "model.pt"
        model.save(path, extra_meta={"note": "test"})
        loaded = ConditionalDenoiser.load(path)
        for (na, pa), (nb, pb) in zip(
            model.named_parameters(), loaded.named_parameters()
        ):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_archive_kind_checked(self, model, tmp_path):
        from sketchmatch.encoders import IdentityEncoder
        from sketchmatch.errors import CheckpointError

        path = tmp_path / "model.pt"
        model.save(path)
        with pytest.raises(CheckpointError, match="identity-encoder"):
            IdentityEncoder.load(path)

    def test_missing_file(self, tmp_path):
        from sketchmatch.errors import CheckpointError

        with pytest.raises(CheckpointError, match="not found"):
            ConditionalDenoiser.load(tmp_path / "nope.pt")


class TestTimeEmbedding:
    def test_shape_and_range(self):
        emb = sinusoidal_embedding(torch.tensor([0, 1, 199]), 64)
        assert emb.shape == (3, 64)
        assert float(emb.abs().max()) <= 1.0

    def test_distinct_timesteps_distinct_embeddings(self):
        emb = sinusoidal_embedding(torch.arange(200), 64)
        assert np.unique(emb.numpy(), axis=0).shape[0] == 200
