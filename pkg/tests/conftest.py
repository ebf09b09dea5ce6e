import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from rsamseg.model import ModelConfig
from rsamseg.vit_adapter import ViTConfig

ACCEPTANCE_LINES = []


def tiny_config(**overrides) -> ModelConfig:
    """depth 1, D=8: small enough for float64 finite differences."""
    vit = ViTConfig(image_size=8, patch_size=4, depth=1, embed_dim=8, heads=2, out_chans=8, adapter_bottleneck=2)
    from rsamseg.decoder import DecoderConfig
    from rsamseg.freq_prompt import PromptGeneratorConfig

    decoder = DecoderConfig(transformer_dim=8, heads=2, mlp_dim=16)
    prompt = PromptGeneratorConfig(embed_dim=8, depth=1, tune_dim=4)
    return ModelConfig(vit=vit, prompt=prompt, decoder=decoder, **overrides)


def toy_config(**overrides) -> ModelConfig:
    vit = ViTConfig(image_size=32, patch_size=8, depth=2, embed_dim=32, heads=4, out_chans=32)
    return ModelConfig(vit=vit, **overrides)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def write_png(path, array):
    from PIL import Image
    import numpy as np

    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.asarray(array)
    Image.fromarray(array).save(path)


def write_cloud38(root, split, scene_ids, size, band_values=None, with_gt=True):
    """Tiny cloud38 layout: one 16-bit PNG per band, labels in {0, 255}."""
    import numpy as np

    band_values = band_values or {"red": 4, "green": 3, "blue": 2}
    for sid in scene_ids:
        for name, value in band_values.items():
            write_png(root / f"{split}_{name}" / f"{name}_{sid}.png", np.full((size, size), value, np.uint16))
        if with_gt:
            gt = np.zeros((size, size), np.uint8)
            gt[: size // 2] = 255
            write_png(root / f"{split}_gt" / f"gt_{sid}.png", gt)
