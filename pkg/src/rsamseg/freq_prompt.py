"""High-frequency image components and the per-layer prompt generator.

The prompt for encoder layer ``i`` is

    P_i = up(GELU(tune_i(F_pe + F_hfc)))

where ``F_pe`` is a scaled linear projection of the backbone patch tokens and
``F_hfc`` is a patch projection of the high-pass filtered image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError, DataError


@dataclass(frozen=True)
class HfcMask:
    height: int
    width: int
    tau: float
    grid: torch.Tensor  # (H, W) float, 0 on the suppressed low-frequency region

    @property
    def zero_count(self) -> int:
        return int((self.grid == 0).sum())


def make_hfc_mask(height: int, width: int, tau: float) -> HfcMask:
    """Binary mask over a center-shifted spectrum.

    A bin ``(i, j)`` is zeroed when ``4|(i - H/2)(j - W/2)| / (HW) <= tau``.
    The test is done as ``|(2i - H)(2j - W)| <= tau * H * W`` with the right
    side evaluated as an exact rational, so no pixel flips on float rounding.
    """
    if height < 2 or width < 2:
        raise ParameterError(f"mask needs height, width >= 2, got {height}x{width}")
    if not (0.0 <= tau <= 1.0) or math.isnan(tau):
        raise ParameterError(f"tau must lie in [0, 1], got {tau}")
    limit = math.floor(Fraction(tau) * height * width)
    rows = (2 * torch.arange(height, dtype=torch.int64) - height).abs()
    cols = (2 * torch.arange(width, dtype=torch.int64) - width).abs()
    product = rows[:, None] * cols[None, :]
    grid = (product > limit).to(torch.float32)
    return HfcMask(height, width, float(tau), grid)


def _check_finite(image: torch.Tensor) -> None:
    if not torch.isfinite(image).all():
        raise DataError("image contains non-finite values")


def _masked_inverse(image: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    spectrum = torch.fft.fftshift(torch.fft.fft2(image), dim=(-2, -1))
    spectrum = spectrum * grid.to(spectrum.real.dtype)
    return torch.fft.ifft2(torch.fft.ifftshift(spectrum, dim=(-2, -1)))


def extract_hfc(image: torch.Tensor, tau: float) -> torch.Tensor:
    """High-pass filter every channel of ``image`` (shape ``(..., H, W)``).

    Returns the real part of the inverse transform; same shape and dtype as
    the input.
    """
    if image.dim() < 2:
        raise ShapeError(f"expected (..., H, W) image, got shape {tuple(image.shape)}")
    _check_finite(image)
    h, w = image.shape[-2:]
    mask = make_hfc_mask(h, w, tau)
    return _masked_inverse(image, mask.grid).real.to(image.dtype)


def extract_lfc(image: torch.Tensor, tau: float) -> torch.Tensor:
    """Complement of :func:`extract_hfc`; the two sum back to ``image``."""
    if image.dim() < 2:
        raise ShapeError(f"expected (..., H, W) image, got shape {tuple(image.shape)}")
    _check_finite(image)
    h, w = image.shape[-2:]
    mask = make_hfc_mask(h, w, tau)
    return _masked_inverse(image, 1.0 - mask.grid).real.to(image.dtype)


@dataclass
class PromptGeneratorConfig:
    embed_dim: int
    depth: int
    tune_dim: Optional[int] = None  # defaults to embed_dim // 16
    fpe_scale: float = 1.0
    tau: float = 0.25

    def __post_init__(self) -> None:
        if self.tune_dim is None:
            self.tune_dim = max(1, self.embed_dim // 16)
        if not 1 <= self.tune_dim <= self.embed_dim:
            raise ParameterError(
                f"tune_dim must be in [1, {self.embed_dim}], got {self.tune_dim}"
            )
        if self.depth < 1:
            raise ParameterError(f"depth must be >= 1, got {self.depth}")
        if not 0.0 <= self.tau <= 1.0:
            raise ParameterError(f"tau must lie in [0, 1], got {self.tau}")


class PromptGenerator(nn.Module):
    """Builds one prompt grid per encoder layer from patch tokens and HFC.

    Branches disabled at construction time own no parameters. The
    ``use_fpe`` / ``use_fhfc`` attributes can also be switched off later,
    in which case the branch contributes a zero grid.
    """

    def __init__(
        self,
        config: PromptGeneratorConfig,
        in_chans: int = 3,
        patch_size: int = 16,
        use_fpe: bool = True,
        use_fhfc: bool = True,
    ) -> None:
        super().__init__()
        if not (use_fpe or use_fhfc):
            raise ParameterError("prompt generator needs at least one input branch")
        self.config = config
        self.patch_size = patch_size
        self.in_chans = in_chans
        self.use_fpe = use_fpe
        self.use_fhfc = use_fhfc
        t, d = config.tune_dim, config.embed_dim

        self.embedding_generator = nn.Linear(d, t) if use_fpe else None
        self.hfc_embed = (
            nn.Conv2d(in_chans, t, kernel_size=patch_size, stride=patch_size)
            if use_fhfc
            else None
        )
        self.tune = nn.ModuleList([nn.Linear(t, t) for _ in range(config.depth)])
        self.up = nn.Linear(t, d)

    def embed_hfc(self, hfc: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) high-pass image -> (B, N, tune_dim) tokens."""
        if self.hfc_embed is None:
            raise ParameterError("model was built without the HFC branch")
        h, w = hfc.shape[-2:]
        p = self.patch_size
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} is not divisible by patch size {p}")
        return self.hfc_embed(hfc).flatten(2).transpose(1, 2)

    def tune_embedding(self, fpe_raw: torch.Tensor) -> torch.Tensor:
        if self.embedding_generator is None:
            raise ParameterError("model was built without the embedding branch")
        if fpe_raw.shape[-1] != self.config.embed_dim:
            raise ShapeError(
                f"expected token width {self.config.embed_dim}, got {fpe_raw.shape[-1]}"
            )
        return self.config.fpe_scale * self.embedding_generator(fpe_raw)

    def generate_prompt(
        self, fpe: torch.Tensor, fhfc: torch.Tensor, layer: int
    ) -> torch.Tensor:
        if fpe.shape != fhfc.shape:
            raise ShapeError(f"F_pe {tuple(fpe.shape)} and F_hfc {tuple(fhfc.shape)} differ")
        if fpe.shape[-1] != self.config.tune_dim:
            raise ShapeError(
                f"expected width {self.config.tune_dim}, got {fpe.shape[-1]}"
            )
        if not 0 <= layer < self.config.depth:
            raise ParameterError(f"layer {layer} outside [0, {self.config.depth})")
        hidden = F.gelu(self.tune[layer](fpe + fhfc))
        return self.up(hidden)

    def forward(self, image: torch.Tensor, patch_tokens: torch.Tensor) -> List[torch.Tensor]:
        """Prompts for every layer.

        ``patch_tokens`` are the backbone patch embeddings before the position
        table is added, shape (B, N, D).
        """
        b, n, _ = patch_tokens.shape
        zeros = patch_tokens.new_zeros(b, n, self.config.tune_dim)
        if self.use_fpe and self.embedding_generator is not None:
            fpe = self.tune_embedding(patch_tokens)
        else:
            fpe = zeros
        if self.use_fhfc and self.hfc_embed is not None:
            fhfc = self.embed_hfc(extract_hfc(image, self.config.tau))
        else:
            fhfc = zeros
        return [self.generate_prompt(fpe, fhfc, i) for i in range(self.config.depth)]
