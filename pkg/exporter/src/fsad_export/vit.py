"""Vision transformer with register tokens, plus the layer-extraction wrapper.

The wrapper is what gets exported: given pre-normalized pixels it returns the
chosen blocks' patch tokens (cls and register tokens stripped, row-major) and
the final block's class token, matching the engine's model contract.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ExportError


@dataclass(frozen=True)
class VitVariant:
    dim: int
    depth: int
    heads: int
    patch_size: int = 14
    n_registers: int = 4
    mlp_ratio: float = 4.0


VARIANTS = {
    "vit-s/14": VitVariant(dim=384, depth=12, heads=6),
    "vit-b/14": VitVariant(dim=768, depth=12, heads=12),
    "vit-l/14": VitVariant(dim=1024, depth=24, heads=16),
}


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    """Patch embedding, class + register tokens, pre-norm blocks."""

    def __init__(self, variant: VitVariant, img_size: int):
        super().__init__()
        if img_size % variant.patch_size != 0:
            raise ExportError(
                f"resolution {img_size} is not divisible by patch size "
                f"{variant.patch_size}"
            )
        self.variant = variant
        self.grid = img_size // variant.patch_size
        d = variant.dim
        self.patch_embed = nn.Conv2d(
            3, d, kernel_size=variant.patch_size, stride=variant.patch_size
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.register_tokens = nn.Parameter(torch.zeros(1, variant.n_registers, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + self.grid**2, d))
        self.blocks = nn.ModuleList(
            Block(d, variant.heads, variant.mlp_ratio) for _ in range(variant.depth)
        )
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.register_tokens, std=0.02)

    @property
    def n_prefix_tokens(self) -> int:
        # class token followed by register tokens, then patches
        return 1 + self.variant.n_registers

    def forward_hidden(self, pixels: torch.Tensor) -> list[torch.Tensor]:
        """Per-block token sequences [B, 1 + registers + grid^2, D]."""
        b = pixels.shape[0]
        x = self.patch_embed(pixels).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1) + self.pos_embed
        x = torch.cat(
            [x[:, :1], self.register_tokens.expand(b, -1, -1), x[:, 1:]], dim=1
        )
        hidden = []
        for block in self.blocks:
            x = block(x)
            hidden.append(x)
        return hidden


class LayerExtractor(nn.Module):
    """Restricts a transformer to the engine's model contract.

    Outputs, in order: one [1, grid^2, D] tensor of normalized patch tokens
    per requested block (1-based indices), then the final block's normalized
    class token [1, D].
    """

    def __init__(self, vit: VisionTransformer, layer_indices):
        super().__init__()
        idx = tuple(int(i) for i in layer_indices)
        depth = vit.variant.depth
        if not idx or list(idx) != sorted(set(idx)):
            raise ExportError("layer indices must be non-empty, strictly increasing")
        bad = [i for i in idx if not 1 <= i <= depth]
        if bad:
            raise ExportError(
                f"layer indices {bad} out of range for a {depth}-block model"
            )
        self.vit = vit
        self.layer_indices = idx

    @property
    def output_names(self) -> list[str]:
        return [f"layer_{i:02d}" for i in self.layer_indices] + ["cls"]

    def forward(self, pixels: torch.Tensor):
        hidden = self.vit.forward_hidden(pixels)
        skip = self.vit.n_prefix_tokens
        outs = [self.vit.norm(hidden[i - 1])[:, skip:, :] for i in self.layer_indices]
        cls = self.vit.norm(hidden[-1])[:, 0, :]
        return (*outs, cls)


def build_backbone(
    name: str,
    resolution: int,
    weights_path=None,
    seed: int = 0,
) -> VisionTransformer:
    """Construct a known variant; random init unless a state dict is given."""
    if name not in VARIANTS:
        raise ExportError(
            f"unsupported backbone {name!r}; known: {sorted(VARIANTS)}"
        )
    torch.manual_seed(seed)
    vit = VisionTransformer(VARIANTS[name], img_size=resolution)
    if weights_path is not None:
        try:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
        except Exception as e:
            raise ExportError(f"cannot load weights {weights_path}: {e}") from e
        vit.load_state_dict(state)
    vit.eval()
    return vit


def grid_side(resolution: int, patch_size: int = 14) -> int:
    if resolution % patch_size:
        raise ExportError(
            f"resolution {resolution} is not divisible by patch size {patch_size}"
        )
    return resolution // patch_size


def token_count(resolution: int, patch_size: int = 14) -> int:
    return grid_side(resolution, patch_size) ** 2
