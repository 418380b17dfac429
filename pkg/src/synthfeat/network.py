"""Torch realization of an ArchitectureConfig.

The model owns three parameter sets: the shared base+bottleneck trunk, the
three deconvolutional task heads, and the patch discriminator. Layer order
inside a block is op -> batchnorm -> activation -> (optional center crop).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .arch import ArchitectureConfig, LayerSpec, CONV, POOL, DECONV

HEAD_NAMES = ("depth", "normal", "contour")


def center_crop(x: torch.Tensor, size: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    if h < size or w < size:
        raise ValueError(f"cannot center-crop {h}x{w} to {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return x[..., top:top + size, left:left + size]


class LayerBlock(nn.Module):
    """One spec'd layer: conv / max-pool / deconv with optional BN and act."""

    def __init__(self, spec: LayerSpec, in_channels: int):
        super().__init__()
        self.spec = spec
        if spec.kind == CONV:
            self.op = nn.Conv2d(in_channels, spec.out_channels, spec.kernel,
                                spec.stride, spec.padding, spec.dilation,
                                bias=not spec.batchnorm)
        elif spec.kind == DECONV:
            self.op = nn.ConvTranspose2d(in_channels, spec.out_channels,
                                         spec.kernel, spec.stride, spec.padding,
                                         bias=not spec.batchnorm)
        elif spec.kind == POOL:
            self.op = nn.MaxPool2d(spec.kernel, spec.stride, spec.padding)
        else:
            raise ValueError(spec.kind)
        self.bn = nn.BatchNorm2d(spec.out_channels) if spec.batchnorm else nn.Identity()
        if spec.activation == "relu":
            self.act = nn.ReLU(inplace=False)
        elif spec.activation == "leaky-relu":
            self.act = nn.LeakyReLU(0.2, inplace=False)
        else:
            self.act = nn.Identity()

    def forward(self, x):
        return self.post(self.op(x))

    def post(self, pre):
        y = self.act(self.bn(pre))
        if self.spec.crop_to is not None:
            y = center_crop(y, self.spec.crop_to)
        return y


class MultiTaskModel(nn.Module):
    """Shared trunk, three task heads, patch discriminator.

    forward_base returns every named trunk activation, so any configured tap
    layer can feed the discriminator or the evaluation feature extractors.
    """

    def __init__(self, config: ArchitectureConfig, init_seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.init_seed = init_seed

        self.trunk_blocks = nn.ModuleDict()
        in_c = 3
        for spec in config.trunk():
            block = LayerBlock(spec, in_c)
            self.trunk_blocks[spec.name] = block
            in_c = spec.out_channels if spec.kind != POOL else in_c

        trunk_out_c = in_c
        skip_channels = config._skip_channels()
        self.head_blocks = nn.ModuleDict()
        for head_name, specs in config.heads.items():
            blocks = nn.ModuleDict()
            c = trunk_out_c
            for spec in specs:
                c += skip_channels.get((head_name, spec.name), 0)
                blocks[spec.name] = LayerBlock(spec, c)
                c = spec.out_channels
            self.head_blocks[head_name] = blocks

        tap_c = config.trunk_shapes()[config.resolve_tap()][0]
        self.disc_blocks = nn.ModuleDict()
        c = tap_c
        for spec in config.discriminator:
            self.disc_blocks[spec.name] = LayerBlock(spec, c)
            c = spec.out_channels

        self._init_parameters(init_seed)

    def _init_parameters(self, seed: int):
        """Fan-in-scaled uniform init, reproducible from the recorded seed."""
        gen = torch.Generator().manual_seed(seed)
        for name, module in sorted(self.named_modules()):
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = module.weight.shape[1 if isinstance(module, nn.Conv2d) else 0]
                fan_in *= module.weight.shape[2] * module.weight.shape[3]
                bound = 1.0 / math.sqrt(fan_in)
                with torch.no_grad():
                    module.weight.uniform_(-math.sqrt(3.0) * bound,
                                           math.sqrt(3.0) * bound, generator=gen)
                    if module.bias is not None:
                        module.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(module, nn.BatchNorm2d):
                with torch.no_grad():
                    module.weight.fill_(1.0)
                    module.bias.fill_(0.0)
                    module.running_mean.fill_(0.0)
                    module.running_var.fill_(1.0)

    # parameter groups -----------------------------------------------------

    def base_parameters(self):
        return list(self.trunk_blocks.parameters())

    def head_parameters(self):
        return list(self.head_blocks.parameters())

    def discriminator_parameters(self):
        return list(self.disc_blocks.parameters())

    # forward passes -------------------------------------------------------

    def forward_base(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        """Run the trunk, returning activations for every named layer.

        With ``config.pre_activation_tap`` the tap layer's entry holds the
        raw layer output before batchnorm/activation.
        """
        res = self.config.input_resolution
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[-1] != res:
            raise ValueError(
                f"expected B x 3 x {res} x {res} input, got {tuple(images.shape)}")
        tap_name = self.config.resolve_tap()
        acts = {}
        x = images
        for name, block in self.trunk_blocks.items():
            pre = block.op(x)
            x = block.post(pre)
            if self.config.pre_activation_tap and name == tap_name:
                acts[name] = pre
            else:
                acts[name] = x
        acts["_trunk_out"] = x
        return acts

    def forward_heads(self, feats: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        """Task predictions at input resolution.

        Returns contour logits (B,1,H,W), log-depth (B,1,H,W), and per-pixel
        unit normals (B,3,H,W).
        """
        if "_trunk_out" not in feats:
            raise KeyError("feats must come from forward_base (missing trunk output)")
        skip_map = {}
        for src, dst in self.config.skip_connections:
            skip_map.setdefault(dst, []).append(src)
        res = self.config.input_resolution
        out = {}
        for head_name, blocks in self.head_blocks.items():
            x = feats["_trunk_out"]
            for lname, block in blocks.items():
                for src in skip_map.get(lname, []):
                    if src not in feats:
                        raise KeyError(f"missing tap {src!r} for skip into {lname!r}")
                    x = torch.cat([x, feats[src]], dim=1)
                x = block(x)
            x = center_crop(x, res)
            if head_name == "normal":
                norm = x.norm(dim=1, keepdim=True).clamp_min(1e-6)
                x = x / norm
            out[head_name] = x
        return out

    def forward_discriminator(self, tap_features: torch.Tensor) -> torch.Tensor:
        """Patch logits (B,1,h',w'); no sigmoid applied."""
        expected_c = self.config.trunk_shapes()[self.config.resolve_tap()][0]
        if tap_features.ndim != 4 or tap_features.shape[1] != expected_c:
            raise ValueError(
                f"discriminator expects {expected_c} channels, "
                f"got {tuple(tap_features.shape)}")
        x = tap_features
        for block in self.disc_blocks.values():
            x = block(x)
        return x

    def forward(self, images: torch.Tensor):
        feats = self.forward_base(images)
        return self.forward_heads(feats)

    def tap_features(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward_base(images)[self.config.resolve_tap()]


def build_model(config: ArchitectureConfig, seed: int = 0) -> MultiTaskModel:
    return MultiTaskModel(config, init_seed=seed)
