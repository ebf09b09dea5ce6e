"""Plain pre-norm ViT encoder with optional Adapter-Scale bottlenecks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError


@dataclass
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    in_chans: int = 3
    depth: int = 2
    embed_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    out_chans: int = 64  # neck width, must match the decoder transformer_dim
    adapter_bottleneck: Optional[int] = None  # defaults to embed_dim // 4
    adapter_scale: float = 0.5

    def __post_init__(self) -> None:
        if self.adapter_bottleneck is None:
            self.adapter_bottleneck = max(1, self.embed_dim // 4)
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if not 1 <= self.adapter_bottleneck < self.embed_dim:
            raise ConfigurationError(
                f"adapter bottleneck must be in [1, {self.embed_dim}), got {self.adapter_bottleneck}"
            )
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size**2


@dataclass
class EncoderOutput:
    tokens: torch.Tensor  # (B, N, D) output of the last block
    spatial: torch.Tensor  # (B, out_chans, H/p, W/p) after the neck


class AdapterScale(nn.Module):
    """Down-projection, ReLU, up-projection, times a fixed scale."""

    def __init__(self, dim: int, bottleneck: int, scale: float = 0.5) -> None:
        super().__init__()
        if bottleneck >= dim:
            raise ConfigurationError(f"bottleneck {bottleneck} must be < dim {dim}")
        self.dim = dim
        self.scale = scale
        self.down = nn.Linear(dim, bottleneck)
        self.up = nn.Linear(bottleneck, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"adapter expects width {self.dim}, got {x.shape[-1]}")
        return self.scale * self.up(F.relu(self.down(x)))


class LayerNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-6) -> None:
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * (d // self.heads) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class MLPBlock(nn.Module):
    def __init__(self, dim: int, hidden: int) -> None:
        super().__init__()
        self.lin1 = nn.Linear(dim, hidden)
        self.lin2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.lin2(F.gelu(self.lin1(x)))


class Block(nn.Module):
    """Pre-norm transformer block.

    With adapters::

        h = x + prompt
        h = h + attn(norm1(h + adapter_attn(h)))
        out = h + mlp(norm2(h)) + adapter_mlp(norm2(h))

    The first adapter sits on a skip path so that a zero up-projection leaves
    the block identical to the plain one.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        mlp_ratio: float = 4.0,
        adapter_bottleneck: Optional[int] = None,
        adapter_scale: float = 0.5,
    ) -> None:
        super().__init__()
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLPBlock(dim, int(dim * mlp_ratio))
        if adapter_bottleneck:
            self.adapter_attn = AdapterScale(dim, adapter_bottleneck, adapter_scale)
            self.adapter_mlp = AdapterScale(dim, adapter_bottleneck, adapter_scale)
        else:
            self.adapter_attn = None
            self.adapter_mlp = None

    def forward(self, x: torch.Tensor, prompt: Optional[torch.Tensor] = None) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"block expects width {self.dim}, got {x.shape[-1]}")
        if prompt is not None:
            if prompt.shape != x.shape:
                raise ShapeError(
                    f"prompt {tuple(prompt.shape)} does not match tokens {tuple(x.shape)}"
                )
            x = x + prompt
        attn_in = x if self.adapter_attn is None else x + self.adapter_attn(x)
        x = x + self.attn(self.norm1(attn_in))
        normed = self.norm2(x)
        out = x + self.mlp(normed)
        if self.adapter_mlp is not None:
            out = out + self.adapter_mlp(normed)
        return out


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection; tokens come out in row-major order."""

    def __init__(self, patch_size: int, in_chans: int, embed_dim: int) -> None:
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % self.patch_size or w % self.patch_size:
            raise ShapeError(f"image {h}x{w} is not divisible by patch size {self.patch_size}")
        return self.proj(x).flatten(2).transpose(1, 2)


class ViTEncoder(nn.Module):
    def __init__(self, config: ViTConfig, use_adapter_scale: bool = True) -> None:
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = PatchEmbed(config.patch_size, config.in_chans, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_tokens, d))
        bottleneck = config.adapter_bottleneck if use_adapter_scale else None
        self.blocks = nn.ModuleList(
            Block(d, config.heads, config.mlp_ratio, bottleneck, config.adapter_scale)
            for _ in range(config.depth)
        )
        self.neck = nn.Sequential(
            nn.Conv2d(d, config.out_chans, kernel_size=1, bias=False),
            LayerNorm2d(config.out_chans),
            nn.Conv2d(config.out_chans, config.out_chans, kernel_size=3, padding=1, bias=False),
            LayerNorm2d(config.out_chans),
        )

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        """Patch tokens before the position table (the source of F_pe)."""
        c, h, w = image.shape[-3:]
        cfg = self.config
        if c != cfg.in_chans or h != cfg.image_size or w != cfg.image_size:
            raise ShapeError(
                f"expected (B, {cfg.in_chans}, {cfg.image_size}, {cfg.image_size}) images, "
                f"got {tuple(image.shape)}"
            )
        return self.patch_embed(image)

    def forward(
        self,
        image: torch.Tensor,
        prompts: Sequence[torch.Tensor] = (),
        patch_tokens: Optional[torch.Tensor] = None,
    ) -> EncoderOutput:
        if prompts and len(prompts) != len(self.blocks):
            raise ConfigurationError(
                f"got {len(prompts)} prompts for {len(self.blocks)} blocks"
            )
        if patch_tokens is None:
            patch_tokens = self.embed(image)
        x = patch_tokens + self.pos_embed
        for i, blk in enumerate(self.blocks):
            x = blk(x, prompts[i] if prompts else None)
        b, n, d = x.shape
        g = self.config.grid_size
        spatial = self.neck(x.transpose(1, 2).reshape(b, d, g, g))
        return EncoderOutput(tokens=x, spatial=spatial)

