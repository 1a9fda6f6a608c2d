"""Tests for tokenization, the siamese encoder, the cross decoder and the heads."""

import numpy as np
import pytest
import torch

from retinapair.data.masking import BatchLayout, MaskPlan, batch_layout
from retinapair.data.retina import EligibilityGrid
from retinapair.errors import ValidationError
from retinapair.models.network import (
    ModelConfig,
    SiameseMaskedViT,
    TokenSlot,
    count_parameters,
    patchify,
    sincos_pos_embed,
    unpatchify,
)


def tiny_parameter_count(meta: bool = True) -> int:
    d, dd, patch_dim = 128, 128, 768
    encoder_block = 12 * d * d + 13 * d
    decoder_block = 16 * dd * dd + 19 * dd
    total = (
        patch_dim * d + d  # patch embedding
        + d  # cls
        + (3 if meta else 1) * d  # slot embeddings
        + 4 * encoder_block
        + 2 * d  # encoder norm
        + d * dd + dd  # decoder embedding
        + dd  # mask token
        + 2 * decoder_block
        + 2 * dd  # decoder norm
        + dd * patch_dim + patch_dim  # pixel head
        + (d + 1) + (2 * d + 2)  # age and gender heads
    )
    if meta:
        total += 2 * d
    return total


def plan_with(visible) -> MaskPlan:
    visible = np.asarray(visible)
    return MaskPlan(
        eligible=EligibilityGrid.full(14),
        visible_indices=visible,
        masked_indices=np.setdiff1d(np.arange(196), visible),
        ratio_used=0.9,
    )


@pytest.fixture
def model(tiny_model_config):
    torch.manual_seed(0)
    return SiameseMaskedViT(tiny_model_config).eval()


@pytest.fixture
def images():
    return torch.rand(2, 3, 224, 224, generator=torch.Generator().manual_seed(1))


class TestPatchify:
    """Patch extraction and its inverse."""

    def test_constant_image(self):
        patches = patchify(torch.full((1, 3, 224, 224), 0.25), 16)
        assert patches.shape == (1, 196, 768)
        assert torch.all(patches == 0.25)

    def test_inverse(self, images):
        assert torch.equal(unpatchify(patchify(images, 16), 16), images)

    def test_first_patch_is_top_left_block(self, images):
        patches = patchify(images, 16)
        block = images[0, :, :16, :16].permute(1, 2, 0).reshape(-1)
        assert torch.equal(patches[0, 0], block)

    def test_rejects_indivisible(self):
        with pytest.raises(ValidationError):
            patchify(torch.zeros(1, 3, 100, 100), 16)

    def test_sincos_shape(self):
        embed = sincos_pos_embed(128, 14)
        assert embed.shape == (196, 128)
        with pytest.raises(ValidationError):
            sincos_pos_embed(130, 14)


class TestModelConfig:
    """Preset and ablation validation."""

    def test_layouts(self, tiny_model_config):
        expected = [TokenSlot.CLS, TokenSlot.AGE, TokenSlot.GENDER]
        assert tiny_model_config.layout == expected
        ablation = tiny_model_config.model_copy(update={"meta_token_count": 0})
        assert ablation.layout == [TokenSlot.CLS]

    def test_rejects_one_meta_token(self):
        with pytest.raises(ValueError):
            ModelConfig(meta_token_count=1)

    def test_rejects_bad_patch(self):
        with pytest.raises(ValueError):
            ModelConfig(patch_size=15)

    @pytest.mark.parametrize("meta", [True, False])
    def test_parameter_count(self, tiny_model_config, meta):
        config = tiny_model_config.model_copy(
            update={"meta_token_count": 2 if meta else 0}
        )
        assert count_parameters(SiameseMaskedViT(config)) == tiny_parameter_count(meta)


class TestEncode:
    """Shared-weight encoder."""

    def test_full_grid(self, model, images):
        out = model.encode(images)
        assert out.patches.shape == (2, 196, 128)
        assert out.cls.shape == (2, 128)
        assert out.meta.shape == (2, 2, 128)
        assert out.padding is None

    def test_two_visible(self, model, images):
        layout = batch_layout([plan_with([3, 17]), plan_with([5, 6])])
        out = model.encode(images, visible=layout, capture_layer=0)
        assert out.patches.shape == (2, 2, 128)
        assert out.attention.shape[-1] == 5

    def test_siamese_views_share_weights(self, model, images):
        pair = torch.stack([images[0], images[0]])
        out = model.encode(pair)
        assert torch.equal(out.cls[0], out.cls[1])
        assert torch.equal(out.patches[0], out.patches[1])

    def test_padding_does_not_leak(self, model, images):
        alone = model.encode(images[:1], visible=batch_layout([plan_with([4])]))
        padded = model.encode(
            images, visible=batch_layout([plan_with([4]), plan_with([1, 2, 3])])
        )
        assert torch.allclose(alone.cls[0], padded.cls[0], atol=1e-5)
        assert torch.allclose(alone.patches[0, 0], padded.patches[0, 0], atol=1e-5)

    def test_cls_ignores_visible_token_order(self, model, images):
        layout = batch_layout([plan_with([3, 17, 40, 100])] * 2)
        order = torch.tensor([2, 0, 3, 1])
        gather = layout.gather_index[:, order]
        slots = layout.slot_index.clone()
        for row in range(gather.shape[0]):
            slots[row, gather[row]] = torch.arange(gather.shape[1])
        shuffled = BatchLayout(
            gather_index=gather, padding=layout.padding[:, order], slot_index=slots
        )
        model = model.double()
        images = images.double()
        with torch.no_grad():
            ordered_cls = model.encode(images, visible=layout).cls
            shuffled_cls = model.encode(images, visible=shuffled).cls
        assert torch.allclose(ordered_cls, shuffled_cls, atol=1e-6)

    def test_rejects_layout_batch_mismatch(self, model, images):
        with pytest.raises(ValidationError):
            model.encode(images, visible=batch_layout([plan_with([1])]))

    def test_meta_tokens_receive_no_gradient_from_image_path(self, tiny_model_config):
        torch.manual_seed(0)
        model = SiameseMaskedViT(tiny_model_config)
        out = model.encode(torch.rand(2, 3, 224, 224))
        (out.cls.sum() + out.patches.pow(2).sum()).backward()
        assert model.meta_tokens.grad is None or torch.all(model.meta_tokens.grad == 0)
        assert torch.all(model.slot_embed.grad[0, 1:] == 0)
        assert model.cls_token.grad.abs().sum() > 0

    def test_meta_tokens_read_the_image(self, model, images):
        out = model.encode(images)
        assert not torch.allclose(out.meta[0], out.meta[1])


class TestDecodeCross:
    """Cross-attention decoder."""

    def test_shape_and_determinism(self, model, images):
        layout = batch_layout([plan_with([3, 17]), plan_with([8])])
        masked = model.encode(images, visible=layout)
        visible = model.encode(images.flip(0))
        first = model.decode_cross(masked.patches, visible.patches, layout)
        second = model.decode_cross(masked.patches, visible.patches, layout)
        assert first.shape == (2, 196, 768)
        assert torch.equal(first, second)

    def test_depends_on_visible_view(self, model, images):
        layout = batch_layout([plan_with([3]), plan_with([3])])
        masked = model.encode(images, visible=layout)
        a = model.decode_cross(masked.patches, model.encode(images).patches, layout)
        b = model.decode_cross(
            masked.patches, model.encode(images.flip(0)).patches, layout
        )
        assert not torch.allclose(a, b)

    def test_requires_full_visible_view(self, model, images):
        layout = batch_layout([plan_with([3]), plan_with([3])])
        masked = model.encode(images, visible=layout)
        with pytest.raises(ValidationError):
            model.decode_cross(masked.patches, masked.patches, layout)


class TestPredictMeta:
    """Affine metadata heads."""

    def test_zero_weight_heads(self, model):
        with torch.no_grad():
            model.age_head.weight.zero_()
            model.age_head.bias.zero_()
            model.gender_head.weight.zero_()
            model.gender_head.bias.copy_(torch.tensor([0.3, -0.2]))
        age, logits = model.predict_meta(torch.randn(4, 128), torch.randn(4, 128))
        assert torch.allclose(age, torch.full((4,), 0.6))
        assert torch.allclose(logits, torch.tensor([[0.3, -0.2]] * 4))

    def test_age_range(self, model):
        age, _ = model.predict_meta(100 * torch.randn(64, 128), torch.randn(64, 128))
        assert age.min() >= 0.0 and age.max() <= 1.2


class TestAttentionMap:
    """Special-token attention over the patch grid."""

    @pytest.mark.parametrize("token", list(TokenSlot))
    def test_row_sums_to_one(self, model, images, token):
        heatmap = model.attention_map(images[0], token, layer=-1)
        assert heatmap.heatmap.shape == (14, 14)
        assert heatmap.row_sum == pytest.approx(1.0, abs=1e-5)
        assert heatmap.heatmap.sum() <= 1.0 + 1e-6
        assert (heatmap.heatmap >= 0).all()

    def test_layer_normalized(self, model, images):
        assert model.attention_map(images[0], TokenSlot.CLS, layer=-1).layer == 3

    @pytest.mark.parametrize("layer", [4, -5])
    def test_rejects_layer(self, model, images, layer):
        with pytest.raises(ValidationError):
            model.attention_map(images[0], TokenSlot.CLS, layer=layer)

    def test_rejects_missing_token(self, tiny_model_config, images):
        config = tiny_model_config.model_copy(update={"meta_token_count": 0})
        model = SiameseMaskedViT(config)
        with pytest.raises(ValidationError):
            model.attention_map(images[0], TokenSlot.AGE, layer=0)

    def test_deterministic(self, model, images):
        a = model.attention_map(images[0], TokenSlot.GENDER, layer=1)
        b = model.attention_map(images[0], TokenSlot.GENDER, layer=1)
        assert np.array_equal(a.heatmap, b.heatmap)


class TestParameterGroups:
    """Named groups cover the trainable parameters."""

    def test_groups(self, model):
        groups = model.parameter_groups()
        assert set(groups) == {
            "patch_embed",
            "cls_token",
            "slot_embed",
            "encoder",
            "decoder",
            "meta_tokens",
            "meta_heads",
        }
        grouped = {id(p) for params in groups.values() for p in params}
        assert grouped == {id(p) for p in model.parameters()}
