"""ACGAN-style class-conditional generator with conditional batch norm."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .latent import LatentBatch


@dataclass
class GeneratorConfig:
    latent_dim: int = 64
    num_classes: int = 10
    out_shape: tuple = (1, 8, 8)
    hidden: int = 64
    use_conditional_bn: bool = True

    def __post_init__(self):
        self.out_shape = tuple(int(s) for s in self.out_shape)
        c, h, w = self.out_shape
        if h % 4 or w % 4:
            raise ValueError(f"output height/width must be divisible by 4, got {h}x{w}")


@dataclass
class SyntheticBatch:
    samples: torch.Tensor
    soft_labels: torch.Tensor
    is_superposed: bool = False
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.samples.shape[0]


class ConditionalBatchNorm2d(nn.Module):
    """BatchNorm whose affine parameters are the label-weighted mix of per-class (gamma, beta).

    A one-hot label selects its class's parameters exactly; a soft label ``y``
    uses ``sum_c y[c] * (gamma_c, beta_c)``.
    """

    def __init__(self, num_features: int, num_classes: int):
        super().__init__()
        self.bn = nn.BatchNorm2d(num_features, affine=False)
        self.gamma = nn.Parameter(torch.ones(num_classes, num_features))
        self.beta = nn.Parameter(torch.zeros(num_classes, num_features))

    def mixed_affine(self, soft_label: torch.Tensor):
        return soft_label @ self.gamma, soft_label @ self.beta

    def forward(self, x: torch.Tensor, soft_label: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.mixed_affine(soft_label.to(x.dtype))
        return self.bn(x) * gamma[:, :, None, None] + beta[:, :, None, None]


class _PlainBN(nn.BatchNorm2d):
    def forward(self, x, soft_label=None):
        return super().forward(x)


def conditional_bn(features: torch.Tensor, soft_label: torch.Tensor, layer: ConditionalBatchNorm2d) -> torch.Tensor:
    return layer(features, soft_label)


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c_img, h, w = config.out_shape
        ch = config.hidden
        self.init_hw = (h // 4, w // 4)
        self.fc = nn.Linear(config.latent_dim, ch * self.init_hw[0] * self.init_hw[1])

        def norm(n):
            return ConditionalBatchNorm2d(n, config.num_classes) if config.use_conditional_bn else _PlainBN(n)

        self.bn0 = norm(ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.bn1 = norm(ch)
        self.conv2 = nn.Conv2d(ch, ch // 2, 3, padding=1)
        self.bn2 = norm(ch // 2)
        self.conv_out = nn.Conv2d(ch // 2, c_img, 3, padding=1)

    def forward(self, latents: torch.Tensor, soft_labels: torch.Tensor) -> torch.Tensor:
        if latents.dim() != 2 or latents.shape[1] != self.config.latent_dim:
            raise ValueError(f"expected latents of shape (B, {self.config.latent_dim}), got {tuple(latents.shape)}")
        if soft_labels.shape != (latents.shape[0], self.config.num_classes):
            raise ValueError(f"expected soft labels of shape (B, {self.config.num_classes})")
        x = self.fc(latents).view(latents.shape[0], -1, *self.init_hw)
        x = self.bn0(x, soft_labels)
        x = F.interpolate(x, scale_factor=2)
        x = F.leaky_relu(self.bn1(self.conv1(x), soft_labels), 0.2)
        x = F.interpolate(x, scale_factor=2)
        x = F.leaky_relu(self.bn2(self.conv2(x), soft_labels), 0.2)
        return torch.tanh(self.conv_out(x))


def generate(generator: Generator, latents: LatentBatch) -> SyntheticBatch:
    samples = generator(latents.vectors, latents.soft_labels)
    return SyntheticBatch(samples=samples, soft_labels=latents.soft_labels, is_superposed=latents.is_superposed)
