"""RSAM-Seg assembly, ablation flags, freeze policy and checkpoint I/O."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Union

import numpy as np
import torch
import torch.nn as nn

from .decoder import DecoderConfig, MaskDecoder
from .errors import BackboneImportError, CheckpointError, ConfigurationError, ShapeError
from .freq_prompt import PromptGenerator, PromptGeneratorConfig
from .vit_adapter import AdapterScale, LayerNorm2d, ViTConfig, ViTEncoder

GROUPS = ("backbone", "adapter_scale", "adapter_feature", "decoder")


@dataclass
class ModelConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    prompt: Optional[PromptGeneratorConfig] = None
    decoder: Optional[DecoderConfig] = None
    use_fpe: bool = True
    use_fhfc: bool = True
    use_adapter_scale: bool = True
    tau: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.prompt is None:
            self.prompt = PromptGeneratorConfig(
                embed_dim=self.vit.embed_dim, depth=self.vit.depth, tau=self.tau
            )
        if self.decoder is None:
            self.decoder = DecoderConfig(transformer_dim=self.vit.out_chans)
        # the model-level ratio is authoritative
        self.prompt.tau = self.tau
        if self.prompt.embed_dim != self.vit.embed_dim or self.prompt.depth != self.vit.depth:
            raise ConfigurationError(
                "prompt generator embed_dim/depth must match the encoder "
                f"({self.prompt.embed_dim}/{self.prompt.depth} vs "
                f"{self.vit.embed_dim}/{self.vit.depth})"
            )
        if self.decoder.transformer_dim != self.vit.out_chans:
            raise ConfigurationError(
                f"decoder transformer_dim {self.decoder.transformer_dim} does not match "
                f"encoder neck width {self.vit.out_chans}"
            )

    @property
    def use_adapter_feature(self) -> bool:
        return self.use_fpe or self.use_fhfc

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        data = dict(data)
        try:
            vit = ViTConfig(**data.pop("vit", {}))
            prompt = data.pop("prompt", None)
            decoder = data.pop("decoder", None)
            return cls(
                vit=vit,
                prompt=PromptGeneratorConfig(**prompt) if prompt is not None else None,
                decoder=DecoderConfig(**decoder) if decoder is not None else None,
                **data,
            )
        except TypeError as exc:
            raise ConfigurationError(f"bad model config: {exc}") from exc

    def with_flags(self, **flags: bool) -> "ModelConfig":
        return ModelConfig.from_dict({**self.to_dict(), **flags})


class RSAMSeg(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        vit = config.vit
        self.encoder = ViTEncoder(vit, use_adapter_scale=config.use_adapter_scale)
        if config.use_adapter_feature:
            self.prompt_generator = PromptGenerator(
                config.prompt,
                in_chans=vit.in_chans,
                patch_size=vit.patch_size,
                use_fpe=config.use_fpe,
                use_fhfc=config.use_fhfc,
            )
        else:
            self.prompt_generator = None
        self.decoder = MaskDecoder(config.decoder)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        vit = self.config.vit
        expected = (vit.in_chans, vit.image_size, vit.image_size)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeError(f"expected (B, {', '.join(map(str, expected))}) images, got {tuple(images.shape)}")
        patch_tokens = self.encoder.embed(images)
        prompts = self.prompt_generator(images, patch_tokens) if self.prompt_generator else []
        encoded = self.encoder(images, prompts, patch_tokens=patch_tokens)
        return self.decoder(encoded, images.shape[-2:])


def parameter_group(name: str) -> str:
    if name.startswith("prompt_generator."):
        return "adapter_feature"
    if name.startswith("decoder."):
        return "decoder"
    if name.startswith("encoder."):
        return "adapter_scale" if ".adapter_" in name else "backbone"
    raise ConfigurationError(f"parameter {name!r} belongs to no group")


def _name_generator(seed: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed((seed * 1_000_003 + zlib.crc32(name.encode())) % 2**63)


def init_parameters(model: RSAMSeg, seed: int) -> None:
    """Seeded initialization keyed by parameter name.

    Parameters with the same name get the same values in every ablation
    variant built from the same seed.
    """
    zero_modules = set()
    for module in model.modules():
        if isinstance(module, AdapterScale):
            zero_modules.add(id(module.up))
        elif isinstance(module, PromptGenerator):
            zero_modules.add(id(module.up))
    with torch.no_grad():
        for mod_name, module in model.named_modules():
            for pname, p in module.named_parameters(recurse=False):
                name = f"{mod_name}.{pname}" if mod_name else pname
                if isinstance(module, (nn.LayerNorm, LayerNorm2d)):
                    p.fill_(1.0 if pname == "weight" else 0.0)
                elif pname == "bias" or id(module) in zero_modules or name == "decoder.mask_bias":
                    p.zero_()
                elif isinstance(module, nn.Embedding):
                    p.normal_(0.0, 1.0, generator=_name_generator(seed, name))
                else:
                    nn.init.trunc_normal_(
                        p, std=0.02, a=-0.04, b=0.04, generator=_name_generator(seed, name)
                    )


def build(config: ModelConfig) -> RSAMSeg:
    model = RSAMSeg(config)
    init_parameters(model, config.seed)
    return model


def adapter_scale_parameter_count(config: ModelConfig) -> int:
    d, b = config.vit.embed_dim, config.vit.adapter_bottleneck
    return config.vit.depth * 2 * (2 * d * b + d + b)


def adapter_feature_parameter_count(config: ModelConfig) -> int:
    """Closed form for the prompt generator under the configured flags."""
    if not config.use_adapter_feature:
        return 0
    d, t = config.vit.embed_dim, config.prompt.tune_dim
    c, p = config.vit.in_chans, config.vit.patch_size
    total = config.vit.depth * (t * t + t) + t * d + d
    if config.use_fpe:
        total += d * t + t
    if config.use_fhfc:
        total += c * p * p * t + t
    return total


@dataclass
class ParameterEntry:
    name: str
    group: str
    trainable: bool
    numel: int


@dataclass
class ParameterRegistry:
    entries: List[ParameterEntry]

    def names(self, group: Optional[str] = None, trainable: Optional[bool] = None) -> List[str]:
        return [
            e.name
            for e in self.entries
            if (group is None or e.group == group) and (trainable is None or e.trainable == trainable)
        ]

    def count(self, group: Optional[str] = None, trainable: Optional[bool] = None) -> int:
        return sum(
            e.numel
            for e in self.entries
            if (group is None or e.group == group) and (trainable is None or e.trainable == trainable)
        )


def freeze_policy(model: RSAMSeg, train_backbone: bool = False) -> ParameterRegistry:
    """Freeze the backbone group, leave adapters and decoder trainable."""
    entries = []
    for name, p in model.named_parameters():
        group = parameter_group(name)
        trainable = train_backbone or group != "backbone"
        p.requires_grad_(trainable)
        entries.append(ParameterEntry(name, group, trainable, p.numel()))
    return ParameterRegistry(entries)


# -- checkpoint archive ------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"RSAMCKP1"
#   8 bytes   uint64 header length L
#   L bytes   UTF-8 JSON header: config, metadata, tensor index
#             [{name, dtype, shape, offset, nbytes}], payload_sha256
#   payload   raw tensor bytes, little-endian, C order, at the indexed offsets

MAGIC = b"RSAMCKP1"
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.uint8: "|u1",
}
_DTYPE_NAMES = {"<f4": "float32", "<f8": "float64", "<i8": "int64", "|u1": "uint8"}
_NAME_DTYPES = {v: k for k, v in _DTYPE_NAMES.items()}


@dataclass
class CheckpointArchive:
    tensors: Dict[str, torch.Tensor]
    config: Dict[str, Any] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)


def write_archive(archive: CheckpointArchive, path: Union[str, Path]) -> None:
    path = Path(path)
    index, chunks, offset = [], [], 0
    for name, tensor in archive.tensors.items():
        if tensor.dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {tensor.dtype}")
        np_dtype = _DTYPES[tensor.dtype]
        data = np.ascontiguousarray(tensor.detach().cpu().numpy().astype(np_dtype)).tobytes()
        index.append(
            {
                "name": name,
                "dtype": _DTYPE_NAMES[np_dtype],
                "shape": list(tensor.shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = json.dumps(
        {
            "format": 1,
            "config": archive.config,
            "metadata": archive.metadata,
            "tensors": index,
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        },
        indent=1,
        sort_keys=True,
    ).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def read_archive(path: Union[str, Path]) -> CheckpointArchive:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint archive")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + header_len > len(raw):
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    payload = raw[16 + header_len :]
    expected = sum(t["nbytes"] for t in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(
            f"{path} is truncated: payload has {len(payload)} bytes, index needs {expected}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path} payload checksum mismatch")
    tensors = {}
    for entry in header["tensors"]:
        np_dtype = _NAME_DTYPES[entry["dtype"]]
        start = entry["offset"]
        arr = np.frombuffer(payload[start : start + entry["nbytes"]], dtype=np_dtype)
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return CheckpointArchive(tensors, header["config"], header["metadata"])


def save_checkpoint(
    model: RSAMSeg, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None
) -> CheckpointArchive:
    archive = CheckpointArchive(
        tensors={k: v.detach().clone() for k, v in model.state_dict().items()},
        config=model.config.to_dict(),
        metadata=dict(metadata or {}),
    )
    write_archive(archive, path)
    return archive


def load_state(model: RSAMSeg, tensors: Mapping[str, torch.Tensor]) -> None:
    state = model.state_dict()
    missing = sorted(set(state) - set(tensors))
    unexpected = sorted(set(tensors) - set(state))
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint does not fit the model: missing {missing}, unexpected {unexpected}"
        )
    for name, tensor in tensors.items():
        if tuple(tensor.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(tensor.shape)}, model expects {tuple(state[name].shape)}"
            )
    with torch.no_grad():
        for name, tensor in tensors.items():
            state[name].copy_(tensor.to(state[name].dtype))


def load_checkpoint(
    path: Union[str, Path], expected_config: Optional[ModelConfig] = None
) -> RSAMSeg:
    archive = read_archive(path)
    try:
        config = ModelConfig.from_dict(archive.config)
    except ConfigurationError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        raise CheckpointError(f"{path}: stored config differs from the expected config")
    model = RSAMSeg(config)
    load_state(model, archive.tensors)
    return model


@dataclass
class ImportReport:
    matched: List[str]
    missing: List[str]  # backbone tensors of the model that the archive did not supply
    unused: List[str]  # archive tensors that were not imported


NameMap = Union[Mapping[str, str], Callable[[str], Optional[str]], None]


def export_backbone(model: RSAMSeg) -> CheckpointArchive:
    tensors = {
        name: p.detach().clone()
        for name, p in model.named_parameters()
        if parameter_group(name) == "backbone"
    }
    return CheckpointArchive(tensors, config=model.config.to_dict())


def import_backbone(
    model: RSAMSeg,
    archive: Union[CheckpointArchive, Mapping[str, torch.Tensor], str, Path],
    name_map: NameMap = None,
) -> ImportReport:
    """Copy backbone tensors from ``archive`` into ``model``.

    Unmapped names import only into the backbone group; an explicit
    ``name_map`` entry may target any parameter. Shapes are checked for every
    candidate before anything is written.
    """
    if isinstance(archive, (str, Path)):
        archive = read_archive(archive)
    tensors = archive.tensors if isinstance(archive, CheckpointArchive) else dict(archive)
    params = dict(model.named_parameters())
    skip_tokens = model.config.decoder.reinit_output_tokens

    plan, unused = {}, []
    for src, tensor in tensors.items():
        explicit = False
        if callable(name_map):
            dst = name_map(src)
        elif name_map is not None and src in name_map:
            dst, explicit = name_map[src], True
        else:
            dst = src
        if dst is None or dst not in params:
            unused.append(src)
            continue
        if not explicit and parameter_group(dst) != "backbone":
            unused.append(src)
            continue
        if skip_tokens and dst == "decoder.output_tokens.weight":
            unused.append(src)
            continue
        if tuple(tensor.shape) != tuple(params[dst].shape):
            raise BackboneImportError(
                f"{src!r} has shape {tuple(tensor.shape)}, destination {dst!r} "
                f"expects {tuple(params[dst].shape)}"
            )
        plan[dst] = tensor
    with torch.no_grad():
        for dst, tensor in plan.items():
            params[dst].copy_(tensor.to(params[dst].dtype))
    backbone = [n for n in params if parameter_group(n) == "backbone"]
    return ImportReport(
        matched=sorted(plan),
        missing=sorted(n for n in backbone if n not in plan),
        unused=sorted(unused),
    )
