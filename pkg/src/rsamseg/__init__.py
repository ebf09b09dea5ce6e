"""RSAM-Seg: a ViT segmentation model with Adapter-Scale bottlenecks and
frequency-domain prompts, plus data, training and evaluation tooling."""

from .decoder import DecoderConfig, MaskDecoder, logits_to_mask
from .freq_prompt import PromptGenerator, PromptGeneratorConfig, extract_hfc, make_hfc_mask
from .model import (
    ModelConfig,
    RSAMSeg,
    build,
    freeze_policy,
    import_backbone,
    load_checkpoint,
    save_checkpoint,
)
from .vit_adapter import ViTConfig, ViTEncoder

__all__ = [
    "DecoderConfig",
    "MaskDecoder",
    "ModelConfig",
    "PromptGenerator",
    "PromptGeneratorConfig",
    "RSAMSeg",
    "ViTConfig",
    "ViTEncoder",
    "build",
    "extract_hfc",
    "freeze_policy",
    "import_backbone",
    "load_checkpoint",
    "logits_to_mask",
    "make_hfc_mask",
    "save_checkpoint",
]
