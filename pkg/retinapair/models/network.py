"""Siamese ViT encoder with metadata tokens, a cross-attention decoder and meta heads.

Token order inside the encoder is ``[CLS, m_age, m_gender, patch tokens...]``.
Patch tokens carry fixed 2-D sin-cos position embeddings; the special tokens
carry learned slot embeddings. Metadata tokens read from the image but no other
token attends to them, so they only receive gradient through the meta loss.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, model_validator

from retinapair.data.masking import BatchLayout
from retinapair.errors import CheckpointError, ValidationError

logger = logging.getLogger(__name__)


class TransformerShape(NamedTuple):
    dim: int
    heads: int
    depth: int


class EncoderPreset(str, Enum):
    TINY = "tiny"
    VIT_S = "vit_s"
    VIT_B = "vit_b"


class DecoderPreset(str, Enum):
    TINY = "tiny"
    VIT_S = "vit_s"


ENCODER_SHAPES: Dict[EncoderPreset, TransformerShape] = {
    EncoderPreset.TINY: TransformerShape(dim=128, heads=4, depth=4),
    EncoderPreset.VIT_S: TransformerShape(dim=384, heads=6, depth=12),
    EncoderPreset.VIT_B: TransformerShape(dim=768, heads=12, depth=12),
}

DECODER_SHAPES: Dict[DecoderPreset, TransformerShape] = {
    DecoderPreset.TINY: TransformerShape(dim=128, heads=4, depth=2),
    DecoderPreset.VIT_S: TransformerShape(dim=384, heads=6, depth=8),
}


class TokenSlot(str, Enum):
    CLS = "cls"
    AGE = "age"
    GENDER = "gender"


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    image_size: int = 224
    patch_size: int = 16
    in_chans: int = 3
    encoder: EncoderPreset = EncoderPreset.VIT_S
    decoder: DecoderPreset = DecoderPreset.VIT_S
    meta_token_count: int = 2
    mlp_ratio: float = 4.0

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size "
                f"{self.patch_size}"
            )
        if self.meta_token_count not in (0, 2):
            raise ValueError("meta_token_count must be 0 (ablation) or 2 (age, gender)")
        for shape in (self.encoder_shape, self.decoder_shape):
            if shape.dim % shape.heads:
                raise ValueError(
                    f"dim {shape.dim} not divisible by {shape.heads} heads"
                )
        return self

    @property
    def encoder_shape(self) -> TransformerShape:
        return ENCODER_SHAPES[self.encoder]

    @property
    def decoder_shape(self) -> TransformerShape:
        return DECODER_SHAPES[self.decoder]

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.in_chans

    @property
    def uses_meta_tokens(self) -> bool:
        return self.meta_token_count > 0

    @property
    def layout(self) -> List[TokenSlot]:
        """Roles of the special slots preceding the patch tokens."""
        if self.uses_meta_tokens:
            return [TokenSlot.CLS, TokenSlot.AGE, TokenSlot.GENDER]
        return [TokenSlot.CLS]

    @property
    def num_special_tokens(self) -> int:
        return len(self.layout)


# ----------------------------------------
# Tokenization
# ----------------------------------------


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(N, C, H, W) -> (N, L, p*p*C); patch (0, 0) holds rows/cols [0:p] row-major."""
    n, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ValidationError(
            f"image {h}x{w} is not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(n, c, gh, patch_size, gw, patch_size)
    x = torch.einsum("nchpwq->nhwpqc", x)
    return x.reshape(n, gh * gw, patch_size**2 * c)


def unpatchify(
    patches: torch.Tensor, patch_size: int, channels: int = 3
) -> torch.Tensor:
    """(N, L, p*p*C) -> (N, C, H, W); exact inverse of :func:`patchify`."""
    n, length, dim = patches.shape
    grid = int(round(math.sqrt(length)))
    if grid * grid != length or dim != patch_size**2 * channels:
        raise ValidationError(
            f"cannot unpatchify shape {tuple(patches.shape)} with patch {patch_size}"
        )
    x = patches.reshape(n, grid, grid, patch_size, patch_size, channels)
    x = torch.einsum("nhwpqc->nchpwq", x)
    return x.reshape(n, channels, grid * patch_size, grid * patch_size)


def sincos_pos_embed(dim: int, grid_size: int) -> np.ndarray:
    """Fixed 2-D sin-cos embedding, shape (grid_size**2, dim)."""
    if dim % 4:
        raise ValidationError(f"sin-cos embedding needs dim divisible by 4, got {dim}")
    coords = np.arange(grid_size, dtype=np.float64)
    grid_w, grid_h = np.meshgrid(coords, coords)
    omega = 1.0 / 10000 ** (np.arange(dim // 4, dtype=np.float64) / (dim / 4.0))

    def embed_1d(positions: np.ndarray) -> np.ndarray:
        out = np.einsum("m,d->md", positions.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([embed_1d(grid_h), embed_1d(grid_w)], axis=1)


# ----------------------------------------
# Blocks
# ----------------------------------------


class Attention(nn.Module):
    """Multi-head attention; self-attention when ``context`` is None."""

    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)

    def forward(
        self,
        x: torch.Tensor,
        context: Optional[torch.Tensor] = None,
        attn_mask: Optional[torch.Tensor] = None,
        key_padding: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        context = x if context is None else context
        b, n, c = x.shape
        m = context.shape[1]
        q = self.q(x).reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        kv = self.kv(context).reshape(b, m, 2, self.num_heads, self.head_dim)
        k, v = kv.permute(2, 0, 3, 1, 4)

        scores = (q @ k.transpose(-2, -1)) * self.scale
        if attn_mask is not None:
            scores = scores.masked_fill(attn_mask, float("-inf"))
        if key_padding is not None:
            scores = scores.masked_fill(key_padding[:, None, None, :], float("-inf"))
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out), weights


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(
        self,
        x: torch.Tensor,
        attn_mask: Optional[torch.Tensor] = None,
        key_padding: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        attended, weights = self.attn(
            self.norm1(x), attn_mask=attn_mask, key_padding=key_padding
        )
        x = x + attended
        x = x + self.mlp(self.norm2(x))
        return x, weights


class CrossDecoderBlock(nn.Module):
    """Self-attention, then cross-attention into the other view, then MLP."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, num_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        x = x + self.self_attn(self.norm1(x))[0]
        x = x + self.cross_attn(self.norm2(x), context=memory)[0]
        return x + self.mlp(self.norm3(x))


# ----------------------------------------
# Model
# ----------------------------------------


@dataclass
class EncoderOutput:
    cls: torch.Tensor  # (B, D)
    meta: Optional[torch.Tensor]  # (B, 2, D) age then gender
    patches: torch.Tensor  # (B, K, D)
    padding: Optional[torch.Tensor]  # (B, K) True where padded
    attention: Optional[torch.Tensor] = None  # (B, heads, N, N) of the captured layer

    @property
    def meta_age(self) -> Optional[torch.Tensor]:
        return None if self.meta is None else self.meta[:, 0]

    @property
    def meta_gender(self) -> Optional[torch.Tensor]:
        return None if self.meta is None else self.meta[:, 1]


@dataclass
class AttentionMap:
    token: TokenSlot
    layer: int
    heatmap: np.ndarray  # (G, G), patch-restricted attention
    row_sum: float  # full attention row sum before restriction


class SiameseMaskedViT(nn.Module):
    """One weight set encodes both views of a pair."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        enc = config.encoder_shape
        dec = config.decoder_shape
        num_special = config.num_special_tokens

        self.patch_embed = nn.Linear(config.patch_dim, enc.dim)
        self.register_buffer(
            "pos_embed",
            torch.from_numpy(sincos_pos_embed(enc.dim, config.grid_size)).float()[None],
            persistent=False,
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, enc.dim))
        self.meta_tokens: Optional[nn.Parameter] = None
        if config.uses_meta_tokens:
            self.meta_tokens = nn.Parameter(
                torch.zeros(1, config.meta_token_count, enc.dim)
            )
        self.slot_embed = nn.Parameter(torch.zeros(1, num_special, enc.dim))
        self.blocks = nn.ModuleList(
            [
                EncoderBlock(enc.dim, enc.heads, config.mlp_ratio)
                for _ in range(enc.depth)
            ]
        )
        self.norm = nn.LayerNorm(enc.dim)

        self.decoder_embed = nn.Linear(enc.dim, dec.dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dec.dim))
        self.register_buffer(
            "decoder_pos_embed",
            torch.from_numpy(sincos_pos_embed(dec.dim, config.grid_size)).float()[None],
            persistent=False,
        )
        self.decoder_blocks = nn.ModuleList(
            [
                CrossDecoderBlock(dec.dim, dec.heads, config.mlp_ratio)
                for _ in range(dec.depth)
            ]
        )
        self.decoder_norm = nn.LayerNorm(dec.dim)
        self.decoder_pred = nn.Linear(dec.dim, config.patch_dim)

        self.age_head = nn.Linear(enc.dim, 1)
        self.gender_head = nn.Linear(enc.dim, 2)

        self.initialize_weights()

    def initialize_weights(self) -> None:
        specials = (self.cls_token, self.slot_embed, self.mask_token, self.meta_tokens)
        for param in specials:
            if param is not None:
                nn.init.trunc_normal_(param, std=0.02)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    # -- encoder -------------------------------------------------------------

    def _special_tokens(self, batch: int) -> torch.Tensor:
        tokens = [self.cls_token]
        if self.meta_tokens is not None:
            tokens.append(self.meta_tokens)
        special = torch.cat(tokens, dim=1) + self.slot_embed
        return special.expand(batch, -1, -1)

    def _structural_mask(
        self, length: int, device: torch.device
    ) -> Optional[torch.Tensor]:
        """Blocks every non-metadata query from attending to metadata keys.

        Metadata tokens still read CLS and the patches, but nothing reads them,
        so the CLS feature used by the probe carries no metadata-token signal.
        Metadata supervision reaches CLS only through the shared encoder
        weights. With ``lambda_meta = 0`` the metadata tokens receive exactly
        zero gradient.
        """
        if self.meta_tokens is None:
            return None
        num_special = self.config.num_special_tokens
        mask = torch.zeros(length, length, dtype=torch.bool, device=device)
        mask[0, 1:num_special] = True
        mask[num_special:, 1:num_special] = True
        return mask

    def encode(
        self,
        images: torch.Tensor,
        visible: Optional[BatchLayout] = None,
        capture_layer: Optional[int] = None,
    ) -> EncoderOutput:
        """Encode a batch of views.

        ``visible=None`` embeds every patch; otherwise only the gathered
        visible positions are embedded (padded per sample).
        """
        tokens = self.patch_embed(patchify(images, self.config.patch_size))
        tokens = tokens + self.pos_embed.to(tokens.dtype)
        batch, _, dim = tokens.shape

        padding = None
        if visible is not None:
            if visible.gather_index.shape[0] != batch:
                raise ValidationError("mask layout batch size differs from images")
            if visible.slot_index.shape[1] != self.config.num_patches:
                raise ValidationError("mask layout grid differs from the model grid")
            index = visible.gather_index.to(tokens.device)
            tokens = torch.gather(tokens, 1, index[..., None].expand(-1, -1, dim))
            padding = visible.padding.to(tokens.device)

        num_special = self.config.num_special_tokens
        x = torch.cat([self._special_tokens(batch), tokens], dim=1)
        key_padding = None
        if padding is not None:
            special_pad = torch.zeros(
                batch, num_special, dtype=torch.bool, device=x.device
            )
            key_padding = torch.cat([special_pad, padding], dim=1)
        attn_mask = self._structural_mask(x.shape[1], x.device)

        captured = None
        for depth, block in enumerate(self.blocks):
            x, weights = block(x, attn_mask=attn_mask, key_padding=key_padding)
            if capture_layer is not None and depth == capture_layer:
                captured = weights
        x = self.norm(x)

        meta = x[:, 1:num_special] if self.meta_tokens is not None else None
        return EncoderOutput(
            cls=x[:, 0],
            meta=meta,
            patches=x[:, num_special:],
            padding=padding,
            attention=captured,
        )

    # -- decoder -------------------------------------------------------------

    def decode_cross(
        self,
        masked_patches: torch.Tensor,
        visible_view_patches: torch.Tensor,
        layout: BatchLayout,
    ) -> torch.Tensor:
        """Predict pixels for every grid position of the masked view.

        Masked positions get the shared mask token; every decoder block
        cross-attends to the full visible view's patch tokens.
        """
        if visible_view_patches.shape[1] != self.config.num_patches:
            raise ValidationError("visible view must be encoded at full visibility")
        if masked_patches.shape[1] != layout.max_visible:
            raise ValidationError("masked-view tokens do not match the mask layout")
        x = self.decoder_embed(masked_patches)
        batch, _, dim = x.shape
        table = torch.cat([x, self.mask_token.expand(batch, 1, dim)], dim=1)
        slots = layout.slot_index.to(x.device)
        x = torch.gather(table, 1, slots[..., None].expand(-1, -1, dim))
        pos = self.decoder_pos_embed.to(x.dtype)
        x = x + pos
        memory = self.decoder_embed(visible_view_patches) + pos
        for block in self.decoder_blocks:
            x = block(x, memory)
        return self.decoder_pred(self.decoder_norm(x))

    # -- heads ---------------------------------------------------------------

    def predict_meta(
        self, meta_age: torch.Tensor, meta_gender: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Normalized age in [0, 1.2] and two gender logits."""
        age = 1.2 * torch.sigmoid(self.age_head(meta_age)).squeeze(-1)
        return age, self.gender_head(meta_gender)

    # -- inspection ----------------------------------------------------------

    def attention_map(
        self, image: torch.Tensor, token: TokenSlot, layer: int
    ) -> AttentionMap:
        """Head-averaged attention row of a special token over the patch grid."""
        depth = len(self.blocks)
        if not -depth <= layer < depth:
            raise ValidationError(f"layer {layer} outside encoder depth {depth}")
        layer = layer % depth
        layout = self.config.layout
        if token not in layout:
            raise ValidationError(f"model has no {token.value} token")
        if image.dim() == 3:
            image = image[None]
        with torch.no_grad():
            output = self.encode(image, capture_layer=layer)
        assert output.attention is not None
        row = output.attention[0, :, layout.index(token), :].mean(dim=0)
        patch_part = row[self.config.num_special_tokens :]
        grid = self.config.grid_size
        return AttentionMap(
            token=token,
            layer=layer,
            heatmap=patch_part.reshape(grid, grid).cpu().double().numpy(),
            row_sum=float(row.sum()),
        )

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        """Named groups used for gradient-norm logging and gradient checks."""
        groups: Dict[str, List[nn.Parameter]] = {
            "patch_embed": list(self.patch_embed.parameters()),
            "cls_token": [self.cls_token],
            "slot_embed": [self.slot_embed],
            "encoder": list(self.blocks.parameters()) + list(self.norm.parameters()),
            "decoder": (
                list(self.decoder_embed.parameters())
                + [self.mask_token]
                + list(self.decoder_blocks.parameters())
                + list(self.decoder_norm.parameters())
                + list(self.decoder_pred.parameters())
            ),
        }
        if self.meta_tokens is not None:
            groups["meta_tokens"] = [self.meta_tokens]
            groups["meta_heads"] = list(self.age_head.parameters()) + list(
                self.gender_head.parameters()
            )
        return groups


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def load_pretrained_encoder(model: SiameseMaskedViT, path: Path) -> int:
    """Copy shape-matching encoder weights from an external state-dict file."""
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read encoder weights {path}: {e}")
    if isinstance(state, dict) and isinstance(state.get("model"), dict):
        state = state["model"]
    own = model.state_dict()
    copied = {
        key: value
        for key, value in state.items()
        if key in own
        and not key.startswith(("decoder", "mask_token", "age_head", "gender_head"))
        and tuple(value.shape) == tuple(own[key].shape)
    }
    model.load_state_dict(copied, strict=False)
    logger.info(f"Initialized {len(copied)} encoder tensors from {path}")
    return len(copied)
