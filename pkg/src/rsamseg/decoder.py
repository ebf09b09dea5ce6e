"""SAM-style mask decoder run without prompt tokens.

Learned output tokens attend to the image embedding through a two-way
transformer; the mask token then drives a hypernetwork whose output is dotted
with the upscaled embedding. Sparse prompts are an empty sequence and the dense
prompt is a zero grid, so the topology matches the promptable decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .vit_adapter import EncoderOutput, LayerNorm2d


@dataclass
class DecoderConfig:
    transformer_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_dim: int = 128
    attention_downsample_rate: int = 2
    upscale_stages: int = 2
    # Output tokens: index 0 predicts the mask, the rest only provide context
    # in token self-attention (SAM keeps an IoU token in this slot).
    num_output_tokens: int = 2
    reinit_output_tokens: bool = False
    pe_seed: int = 0

    def __post_init__(self) -> None:
        d = self.transformer_dim
        if self.upscale_stages < 1:
            raise ConfigurationError("decoder needs at least one upscale stage")
        if d % (2 ** (self.upscale_stages + 1)):
            raise ConfigurationError(
                f"transformer_dim {d} must be divisible by {2 ** (self.upscale_stages + 1)}"
            )
        if (d // self.attention_downsample_rate) % self.heads or d % self.heads:
            raise ConfigurationError(f"transformer_dim {d} does not split into {self.heads} heads")
        if self.num_output_tokens < 1:
            raise ConfigurationError("need at least one output token")

    @property
    def upscaled_channels(self) -> Tuple[int, ...]:
        return tuple(self.transformer_dim // 2 ** (k + 2) for k in range(self.upscale_stages))


class MLP(nn.Module):
    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int, num_layers: int) -> None:
        super().__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(
            nn.Linear(n, k) for n, k in zip(dims, dims[1:] + [output_dim])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, downsample_rate: int = 1) -> None:
        super().__init__()
        self.heads = heads
        internal = dim // downsample_rate
        self.q_proj = nn.Linear(dim, internal)
        self.k_proj = nn.Linear(dim, internal)
        self.v_proj = nn.Linear(dim, internal)
        self.out_proj = nn.Linear(internal, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        q = self._split(self.q_proj(q))
        k = self._split(self.k_proj(k))
        v = self._split(self.v_proj(v))
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        out = attn.softmax(dim=-1) @ v
        b, h, n, c = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, h * c))


class TwoWayAttentionBlock(nn.Module):
    def __init__(
        self, dim: int, heads: int, mlp_dim: int, downsample_rate: int, skip_first_layer_pe: bool
    ) -> None:
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn_token_to_image = Attention(dim, heads, downsample_rate)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim, dim, 2)
        self.norm3 = nn.LayerNorm(dim)
        self.norm4 = nn.LayerNorm(dim)
        self.cross_attn_image_to_token = Attention(dim, heads, downsample_rate)
        self.skip_first_layer_pe = skip_first_layer_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_layer_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)

        q = queries + query_pe
        k = keys + key_pe
        queries = self.norm2(queries + self.cross_attn_token_to_image(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))

        q = queries + query_pe
        k = keys + key_pe
        keys = self.norm4(keys + self.cross_attn_image_to_token(k, q, queries))
        return queries, keys


class TwoWayTransformer(nn.Module):
    def __init__(self, depth: int, dim: int, heads: int, mlp_dim: int, downsample_rate: int) -> None:
        super().__init__()
        self.layers = nn.ModuleList(
            TwoWayAttentionBlock(dim, heads, mlp_dim, downsample_rate, skip_first_layer_pe=(i == 0))
            for i in range(depth)
        )
        self.final_attn_token_to_image = Attention(dim, heads, downsample_rate)
        self.norm_final_attn = nn.LayerNorm(dim)

    def forward(self, image_embedding, image_pe, tokens):
        keys = image_embedding.flatten(2).transpose(1, 2)
        key_pe = image_pe.flatten(2).transpose(1, 2)
        queries = tokens
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, key_pe)
        q = queries + tokens
        k = keys + key_pe
        queries = self.norm_final_attn(queries + self.final_attn_token_to_image(q, k, keys))
        return queries, keys


class PositionEmbeddingRandom(nn.Module):
    """Random Fourier features of normalized grid coordinates."""

    def __init__(self, num_pos_feats: int, seed: int = 0) -> None:
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("gaussian_matrix", torch.randn(2, num_pos_feats, generator=g))

    def forward(self, h: int, w: int) -> torch.Tensor:
        m = self.gaussian_matrix
        ys = (torch.arange(h, dtype=m.dtype) + 0.5) / h
        xs = (torch.arange(w, dtype=m.dtype) + 0.5) / w
        coords = torch.stack(torch.meshgrid(xs, ys, indexing="xy"), dim=-1)
        coords = 2 * math.pi * ((2 * coords - 1) @ m)
        return torch.cat([coords.sin(), coords.cos()], dim=-1).permute(2, 0, 1)


class MaskDecoder(nn.Module):
    def __init__(self, config: DecoderConfig) -> None:
        super().__init__()
        self.config = config
        d = config.transformer_dim
        self.transformer = TwoWayTransformer(
            config.depth, d, config.heads, config.mlp_dim, config.attention_downsample_rate
        )
        self.output_tokens = nn.Embedding(config.num_output_tokens, d)
        self.pe_layer = PositionEmbeddingRandom(d // 2, seed=config.pe_seed)

        layers = []
        in_ch = d
        for k, out_ch in enumerate(config.upscaled_channels):
            layers.append(nn.ConvTranspose2d(in_ch, out_ch, kernel_size=2, stride=2))
            if k < config.upscale_stages - 1:
                layers.append(LayerNorm2d(out_ch))
            layers.append(nn.GELU())
            in_ch = out_ch
        self.output_upscaling = nn.Sequential(*layers)
        self.output_hypernetwork = MLP(d, d, in_ch, 3)
        self.mask_bias = nn.Parameter(torch.zeros(1))

    def forward(self, embedding: EncoderOutput, output_size: Tuple[int, int]) -> torch.Tensor:
        src = embedding.spatial
        if src.dim() != 4 or src.shape[1] != self.config.transformer_dim:
            raise ConfigurationError(
                f"decoder expects {self.config.transformer_dim} channels, got {tuple(src.shape)}"
            )
        b, c, h, w = src.shape
        dense = torch.zeros_like(src)
        src = src + dense
        image_pe = self.pe_layer(h, w).to(src.dtype).unsqueeze(0)
        tokens = self.output_tokens.weight.unsqueeze(0).expand(b, -1, -1)

        hs, keys = self.transformer(src, image_pe, tokens)
        mask_token = hs[:, 0, :]
        upscaled = self.output_upscaling(keys.transpose(1, 2).reshape(b, c, h, w))
        hyper = self.output_hypernetwork(mask_token)
        _, uc, uh, uw = upscaled.shape
        logits = (hyper.unsqueeze(1) @ upscaled.reshape(b, uc, uh * uw)).reshape(b, 1, uh, uw)
        logits = logits + self.mask_bias
        if (uh, uw) != tuple(output_size):
            logits = F.interpolate(logits, size=output_size, mode="bilinear", align_corners=False)
        return logits


def logits_to_mask(logits: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Binary mask, 1 where sigmoid(logit) > threshold (strict)."""
    return (torch.sigmoid(logits) > threshold).to(torch.uint8)
