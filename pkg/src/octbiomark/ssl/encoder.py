"""Convolutional feature encoder.

The encoder is a stack of conv blocks followed by global average pooling and
one final linear layer. Features handed to clustering come from the pooled
output just before that linear layer, so feature_dim equals the last block's
channel count. The last two conv blocks are named so attribution can pull
their activation maps.
"""

import math
from dataclasses import dataclass, field

import torch
from torch import nn


@dataclass(frozen=True)
class EncoderSpec:
    input_size: tuple[int, int] = (64, 64)  # (height, width)
    channels: tuple[int, ...] = (16, 32, 64, 128)
    strides: tuple[int, ...] = (2, 2, 2, 1)
    embed_dim: int = 64  # output of the final linear layer

    def validate(self) -> None:
        if len(self.channels) < 2:
            raise ValueError("need at least two conv blocks")
        if len(self.strides) != len(self.channels):
            raise ValueError("strides and channels must have equal length")
        if any(c < 1 for c in self.channels) or any(s < 1 for s in self.strides):
            raise ValueError("channels and strides must be positive")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")
        h, w = self.input_size
        if h < 2 ** sum(s > 1 for s in self.strides):
            raise ValueError("input too small for the configured stride stack")

    @property
    def feature_dim(self) -> int:
        """Width of the pre-linear feature vector used as the image feature."""
        return self.channels[-1]

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(f"conv{i + 1}" for i in range(len(self.channels)))

    @property
    def gradcam_layers(self) -> tuple[str, str]:
        """The final two conv blocks, whose activations feed attribution."""
        names = self.layer_names
        return names[-2], names[-1]


DESK_ENCODER = EncoderSpec()

# Scaled-up configuration mirroring a wide residual backbone's 2048-wide
# feature output; kept as a named config, not exercised by the desk tests.
PAPER_SCALE_ENCODER = EncoderSpec(
    input_size=(208, 256),
    channels=(128, 256, 512, 1024, 2048),
    strides=(2, 2, 2, 2, 2),
    embed_dim=256,
)


def _init_conv(conv: nn.Conv2d, gen: torch.Generator) -> None:
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        conv.weight.uniform_(-bound, bound, generator=gen)
        if conv.bias is not None:
            conv.bias.zero_()


def _init_linear(lin: nn.Linear, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(lin.in_features)
    with torch.no_grad():
        lin.weight.uniform_(-bound, bound, generator=gen)
        lin.bias.zero_()


class ConvEncoder(nn.Module):
    """Conv blocks (conv-BN-ReLU) -> global average pool -> linear."""

    def __init__(self, spec: EncoderSpec, seed: int = 0):
        super().__init__()
        spec.validate()
        self.spec = spec
        gen = torch.Generator().manual_seed(seed)
        in_ch = 1
        self.blocks = nn.ModuleDict()
        for name, out_ch, stride in zip(spec.layer_names, spec.channels, spec.strides):
            conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)
            _init_conv(conv, gen)
            self.blocks[name] = nn.Sequential(conv, nn.BatchNorm2d(out_ch), nn.ReLU())
            in_ch = out_ch
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(spec.feature_dim, spec.embed_dim)
        _init_linear(self.fc, gen)

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled features from just before the final linear layer, B x D."""
        for block in self.blocks.values():
            x = block(x)
        return self.pool(x).flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.forward_features(x))

    def forward_with_activations(
        self, x: torch.Tensor, layers: tuple[str, ...] | None = None
    ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        """Features plus the named blocks' activation maps (post-ReLU)."""
        wanted = layers if layers is not None else self.spec.gradcam_layers
        unknown = set(wanted) - set(self.spec.layer_names)
        if unknown:
            raise KeyError(f"unknown encoder layers: {sorted(unknown)}")
        acts: dict[str, torch.Tensor] = {}
        for name, block in self.blocks.items():
            x = block(x)
            if name in wanted:
                acts[name] = x
        return self.pool(x).flatten(1), acts

    def forward_from(self, activation: torch.Tensor, after: str) -> torch.Tensor:
        """Recompute pooled features starting from a given block's output.

        Lets a finite-difference oracle perturb an intermediate activation and
        observe the downstream feature change.
        """
        names = self.spec.layer_names
        if after not in names:
            raise KeyError(f"unknown encoder layer: {after}")
        start = names.index(after) + 1
        x = activation
        for name in names[start:]:
            x = self.blocks[name](x)
        return self.pool(x).flatten(1)
