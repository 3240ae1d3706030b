"""Shared 3D building blocks: residual block, attention gate, squeeze-excite."""

from __future__ import annotations

import dataclasses
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeMismatch


def norm_groups(channels: int, max_groups: int = 8) -> int:
    """Largest divisor of ``channels`` not above ``max_groups``."""
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def conv3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv3d:
    return nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)


def conv1(in_ch: int, out_ch: int) -> nn.Conv3d:
    return nn.Conv3d(in_ch, out_ch, kernel_size=1)


@dataclasses.dataclass(frozen=True)
class ResidualBlockSpec:
    channels: int
    n_convs: int = 2
    norm_groups: int = 8
    dropout3d_p: float = 0.0

    def __post_init__(self):
        if not 2 <= self.n_convs <= 4:
            raise ValueError(f"n_convs must be in [2, 4], got {self.n_convs}")
        if not 0.0 <= self.dropout3d_p < 1.0:
            raise ValueError(f"dropout3d_p must be in [0, 1), got {self.dropout3d_p}")
        if self.channels % self.norm_groups:
            raise ValueError(f"norm_groups {self.norm_groups} does not divide {self.channels}")


@dataclasses.dataclass(frozen=True)
class AttentionGateSpec:
    x_channels: int
    g_channels: int
    inter_channels: int = 0
    per_channel: bool = False

    def __post_init__(self):
        if self.inter_channels == 0:
            object.__setattr__(self, "inter_channels", max(1, self.x_channels // 2))
        if self.inter_channels < 1:
            raise ValueError("inter_channels must be >= 1")


@dataclasses.dataclass(frozen=True)
class SqueezeExciteSpec:
    channels: int
    reduction: int = 4

    def __post_init__(self):
        if self.channels // self.reduction < 1:
            raise ValueError("channels / reduction must be >= 1")


class SqueezeExcite(nn.Module):
    """Channel attention: s = sigmoid(W2 relu(W1 avgpool(x))), out = s * x."""

    def __init__(self, spec: SqueezeExciteSpec):
        super().__init__()
        self.spec = spec
        hidden = spec.channels // spec.reduction
        self.fc1 = nn.Linear(spec.channels, hidden)
        self.fc2 = nn.Linear(hidden, spec.channels)

    def scale(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.spec.channels:
            raise ShapeMismatch(f"expected {self.spec.channels} channels, got {x.shape[1]}")
        pooled = x.mean(dim=(2, 3, 4))
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))
        return s[:, :, None, None, None]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.scale(x)


class AttentionGate(nn.Module):
    """Additive attention gate with the gating signal at the skip's resolution.

    ``alpha = sigmoid(psi(relu(Wx x + Wg g)))`` has a single channel unless
    ``spec.per_channel`` is set, and the output is ``alpha * x``.
    """

    def __init__(self, spec: AttentionGateSpec):
        super().__init__()
        self.spec = spec
        self.wx = conv1(spec.x_channels, spec.inter_channels)
        self.wg = conv1(spec.g_channels, spec.inter_channels)
        self.psi = conv1(spec.inter_channels, spec.x_channels if spec.per_channel else 1)

    def coefficients(self, x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        if x.shape[2:] != g.shape[2:]:
            raise ShapeMismatch(f"gate inputs differ in spatial shape: {tuple(x.shape[2:])} "
                                f"vs {tuple(g.shape[2:])}")
        return torch.sigmoid(self.psi(F.relu(self.wx(x) + self.wg(g))))

    def forward(self, x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        return self.coefficients(x, g) * x


class ResidualBlock(nn.Module):
    """``n_convs`` x (conv3 -> GroupNorm -> ReLU) plus a shortcut.

    The shortcut is a 1x1x1 projection when the channel count changes. When
    ``se`` is set, squeeze-excitation follows the residual sum. Dropout3d is
    applied last.
    """

    def __init__(self, in_ch: int, out_ch: int, n_convs: int = 2, dropout3d_p: float = 0.0,
                 se: bool = False, se_reduction: int = 4, max_groups: int = 8):
        super().__init__()
        self.spec = ResidualBlockSpec(out_ch, n_convs, norm_groups(out_ch, max_groups), dropout3d_p)
        layers = []
        for i in range(n_convs):
            layers += [
                conv3(in_ch if i == 0 else out_ch, out_ch),
                nn.GroupNorm(self.spec.norm_groups, out_ch),
                nn.ReLU(),
            ]
        self.body = nn.Sequential(*layers)
        self.shortcut = conv1(in_ch, out_ch) if in_ch != out_ch else nn.Identity()
        self.se = SqueezeExcite(SqueezeExciteSpec(out_ch, min(se_reduction, out_ch))) if se else None
        self.dropout = nn.Dropout3d(dropout3d_p) if dropout3d_p > 0 else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.body(x) + self.shortcut(x)
        if self.se is not None:
            out = self.se(out)
        return self.dropout(out)


class Upsample(nn.Module):
    """Trilinear resize to the skip's grid followed by a 1x1x1 channel reduction."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.proj = conv1(in_ch, out_ch)

    def forward(self, x: torch.Tensor, size) -> torch.Tensor:
        x = F.interpolate(x, size=tuple(size), mode="trilinear", align_corners=False)
        return self.proj(x)


def fan_in_uniform_(module: nn.Module) -> None:
    """Re-initialize weights with fan-in scaled uniform draws.

    Weights use the ReLU gain (bound ``sqrt(6 / fan_in)``), biases ``1 / sqrt(fan_in)``.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            fan_in = m.weight[0].numel()
            nn.init.uniform_(m.weight, -math.sqrt(6.0 / fan_in), math.sqrt(6.0 / fan_in))
            if m.bias is not None:
                bound = 1.0 / math.sqrt(fan_in)
                nn.init.uniform_(m.bias, -bound, bound)
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
