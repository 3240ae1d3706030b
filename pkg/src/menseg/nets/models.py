"""The three ensemble members and their declarative specs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from ..errors import ConfigError, IndivisibleShape, NonFiniteActivation
from .blocks import AttentionGate, AttentionGateSpec, ResidualBlock, Upsample, conv1, conv3, fan_in_uniform_, norm_groups

KINDS = ("segresnet", "attn_resunet", "ddunet")

DDUNET_DECODER1 = (4, 4, 3, 2)
DDUNET_DECODER2 = (3, 3, 2, 2)
# convolutions per encoder residual block, shallow to deep
DDUNET_ENCODER_CONVS = (2, 2, 3, 3, 4)


@dataclasses.dataclass(frozen=True)
class NetworkSpec:
    kind: str
    init_filters: int = 16
    encoder_blocks: Tuple[int, ...] = (1, 2, 2, 4)
    decoder_blocks: Tuple[Tuple[int, ...], ...] = ((1, 1, 1),)
    dropout_p: float = 0.2
    skip_fusion: str = "sum"
    gated_skips: bool = False
    dual_decoder: bool = False
    in_channels: int = 4
    out_channels: int = 4
    max_norm_groups: int = 8
    se_reduction: int = 4
    gate_per_channel: bool = False
    aux_heads: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown network kind {self.kind!r}; expected one of {KINDS}")
        if self.init_filters < 1:
            raise ConfigError("init_filters must be >= 1")
        if self.skip_fusion not in ("sum", "concat"):
            raise ConfigError(f"skip_fusion must be 'sum' or 'concat', got {self.skip_fusion!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        object.__setattr__(self, "encoder_blocks", tuple(int(b) for b in self.encoder_blocks))
        decoders = self.decoder_blocks
        if decoders and not isinstance(decoders[0], (tuple, list)):
            decoders = (decoders,)
        object.__setattr__(self, "decoder_blocks", tuple(tuple(int(b) for b in d) for d in decoders))
        levels = len(self.encoder_blocks)
        for d in self.decoder_blocks:
            if len(d) != levels - 1:
                raise ConfigError(f"decoder needs {levels - 1} levels, got {len(d)}")
        if self.dual_decoder != (len(self.decoder_blocks) == 2):
            raise ConfigError("dual_decoder must match the number of decoder block lists")
        if self.kind == "ddunet" and any(not 2 <= b <= 4 for d in self.decoder_blocks for b in d):
            raise ConfigError("ddunet decoder blocks hold 2 to 4 convolutions")

    @property
    def levels(self) -> int:
        return len(self.encoder_blocks)

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(self.init_filters * 2 ** i for i in range(self.levels))

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_blocks"] = list(self.encoder_blocks)
        d["decoder_blocks"] = [list(b) for b in self.decoder_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def segresnet_spec(init_filters: int = 16, dropout_p: float = 0.2) -> NetworkSpec:
    return NetworkSpec("segresnet", init_filters, (1, 2, 2, 4), ((1, 1, 1),), dropout_p,
                       skip_fusion="sum", gated_skips=False)


def attn_resunet_spec(init_filters: int = 16, dropout_p: float = 0.2,
                      gated_skips: bool = True) -> NetworkSpec:
    return NetworkSpec("attn_resunet", init_filters, (1, 2, 2, 4), ((1, 1, 1),), dropout_p,
                       skip_fusion="concat", gated_skips=gated_skips)


def ddunet_spec(dropout3d_p: float = 0.1, init_filters: int = 16) -> NetworkSpec:
    return NetworkSpec("ddunet", init_filters, (1, 1, 1, 1, 1),
                       (DDUNET_DECODER1, DDUNET_DECODER2), dropout3d_p,
                       skip_fusion="concat", gated_skips=True, dual_decoder=True)


class ResUNet(nn.Module):
    """Four-level residual encoder-decoder.

    With ``skip_fusion='sum'`` this is the SegResNet-style baseline. With
    ``'concat'`` each skip is (optionally) attention-gated by the upsampled
    decoder features, concatenated with them and reduced back by a 1x1x1
    convolution.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        w = spec.widths
        mg = spec.max_norm_groups
        self.stem = conv3(spec.in_channels, w[0])
        self.stem_dropout = nn.Dropout3d(spec.dropout_p) if spec.dropout_p > 0 else nn.Identity()

        self.down = nn.ModuleList()
        self.encoder = nn.ModuleList()
        for level, n_blocks in enumerate(spec.encoder_blocks):
            self.down.append(conv3(w[level - 1], w[level], stride=2) if level else nn.Identity())
            self.encoder.append(nn.Sequential(
                *[ResidualBlock(w[level], w[level], max_groups=mg) for _ in range(n_blocks)]))

        self.up = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.reduce = nn.ModuleList()
        self.decoder = nn.ModuleList()
        # decoder index 0 is the deepest level
        for i, n_blocks in enumerate(spec.decoder_blocks[0]):
            level = spec.levels - 2 - i
            c = w[level]
            self.up.append(Upsample(w[level + 1], c))
            if spec.skip_fusion == "concat":
                self.gates.append(AttentionGate(AttentionGateSpec(c, c, per_channel=spec.gate_per_channel))
                                  if spec.gated_skips else nn.Identity())
                self.reduce.append(conv1(2 * c, c))
            self.decoder.append(nn.Sequential(
                *[ResidualBlock(c, c, max_groups=mg) for _ in range(n_blocks)]))

        self.head = nn.Sequential(
            nn.GroupNorm(norm_groups(w[0], mg), w[0]),
            nn.ReLU(),
            conv1(w[0], spec.out_channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stem_dropout(self.stem(x))
        skips = []
        for down, enc in zip(self.down, self.encoder):
            h = enc(down(h))
            skips.append(h)
        h = skips.pop()
        for i, (up, dec) in enumerate(zip(self.up, self.decoder)):
            skip = skips.pop()
            h = up(h, skip.shape[2:])
            if self.spec.skip_fusion == "sum":
                h = h + skip
            else:
                gate = self.gates[i]
                gated = gate(skip, h) if isinstance(gate, AttentionGate) else skip
                h = self.reduce[i](torch.cat([gated, h], dim=1))
            h = dec(h)
        return self.head(h)


class _Decoder(nn.Module):
    def __init__(self, widths, convs_per_level, dropout_p, se_reduction, max_groups,
                 out_channels, per_channel_gate):
        super().__init__()
        self.up = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.blocks = nn.ModuleList()
        levels = len(widths)
        for i, n_convs in enumerate(convs_per_level):
            level = levels - 2 - i
            c = widths[level]
            self.up.append(Upsample(widths[level + 1], c))
            self.gates.append(AttentionGate(AttentionGateSpec(c, c, per_channel=per_channel_gate)))
            self.blocks.append(ResidualBlock(2 * c, c, n_convs, dropout_p, se=True,
                                             se_reduction=se_reduction, max_groups=max_groups))
        self.head = conv1(widths[0], out_channels)

    def forward(self, bottom: torch.Tensor, skips: List[torch.Tensor]) -> torch.Tensor:
        h = bottom
        for up, gate, block, skip in zip(self.up, self.gates, self.blocks, reversed(skips)):
            h = up(h, skip.shape[2:])
            h = block(torch.cat([gate(skip, h), h], dim=1))
        return self.head(h)


class DDUNet(nn.Module):
    """Dual-decoder residual U-Net with same-level attention gates and SE.

    Both decoders read the same encoder features through their own gates;
    their 4-channel heads are concatenated and fused by a 1x1x1 convolution.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        w = spec.widths
        mg = spec.max_norm_groups
        p = spec.dropout_p
        self.stem = nn.Sequential(
            conv3(spec.in_channels, w[0]),
            nn.GroupNorm(norm_groups(w[0], mg), w[0]),
            nn.ReLU(),
        )
        self.down = nn.ModuleList()
        self.encoder = nn.ModuleList()
        for level in range(spec.levels):
            self.down.append(conv3(w[level - 1], w[level], stride=2) if level else nn.Identity())
            n_convs = DDUNET_ENCODER_CONVS[min(level, len(DDUNET_ENCODER_CONVS) - 1)]
            self.encoder.append(nn.Sequential(*[
                ResidualBlock(w[level], w[level], n_convs, p, se=True,
                              se_reduction=spec.se_reduction, max_groups=mg)
                for _ in range(spec.encoder_blocks[level])]))
        self.decoders = nn.ModuleList([
            _Decoder(w, blocks, p, spec.se_reduction, mg, spec.out_channels, spec.gate_per_channel)
            for blocks in spec.decoder_blocks
        ])
        self.fuse = conv1(spec.out_channels * len(self.decoders), spec.out_channels)
        self.aux_outputs: Optional[List[torch.Tensor]] = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stem(x)
        skips = []
        for down, enc in zip(self.down, self.encoder):
            h = enc(down(h))
            skips.append(h)
        bottom, skips = skips[-1], skips[:-1]
        heads = [dec(bottom, skips) for dec in self.decoders]
        self.aux_outputs = heads if self.spec.aux_heads else None
        return self.fuse(torch.cat(heads, dim=1))


def build_network(spec: NetworkSpec, seed: int = 0) -> nn.Module:
    """Instantiate ``spec`` with parameters drawn from ``seed``.

    The global torch RNG is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = DDUNet(spec) if spec.kind == "ddunet" else ResUNet(spec)
        fan_in_uniform_(net)
    net.seed = seed
    _install_finite_checks(net)
    return net


def build_segresnet(init_filters: int = 16, dropout_p: float = 0.2, seed: int = 0) -> nn.Module:
    return build_network(segresnet_spec(init_filters, dropout_p), seed)


def build_attention_resunet(init_filters: int = 16, dropout_p: float = 0.2, seed: int = 0,
                            gated_skips: bool = True) -> nn.Module:
    return build_network(attn_resunet_spec(init_filters, dropout_p, gated_skips), seed)


def build_ddunet(dropout3d_p: float = 0.1, init_filters: int = 16, seed: int = 0) -> nn.Module:
    return build_network(ddunet_spec(dropout3d_p, init_filters), seed)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def parameter_manifest(net: nn.Module) -> List[Tuple[str, Tuple[int, ...], int]]:
    return [(name, tuple(p.shape), p.numel()) for name, p in net.named_parameters() if p.requires_grad]


def format_manifest(net: nn.Module) -> str:
    lines = [f"{name:<60s} {str(shape):<24s} {n:>10d}" for name, shape, n in parameter_manifest(net)]
    lines.append(f"{'total':<60s} {'':<24s} {parameter_count(net):>10d}")
    return "\n".join(lines)


def _install_finite_checks(net: nn.Module) -> None:
    """Attach hooks raising :class:`NonFiniteActivation` while ``net.check_finite`` is set."""
    net.check_finite = True

    def make(name):
        def hook(module, inputs, output):
            if net.check_finite and isinstance(output, torch.Tensor) and not torch.isfinite(output).all():
                raise NonFiniteActivation(name)
        return hook

    for name, module in net.named_modules():
        if name and not list(module.children()):
            module.register_forward_hook(make(name))


def forward(net: nn.Module, x) -> torch.Tensor:
    """Run ``net`` on one ``(4, D, H, W)`` volume and return ``(4, D, H, W)`` logits.

    Every spatial size must be divisible by ``2 ** (levels - 1)``. The first
    layer producing NaN/Inf aborts the pass with :class:`NonFiniteActivation`
    naming that layer.
    """
    spec = net.spec
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    param = next(net.parameters())
    x = x.to(dtype=param.dtype)
    if x.ndim != 4 or x.shape[0] != spec.in_channels:
        raise IndivisibleShape(f"expected ({spec.in_channels}, D, H, W) input, got {tuple(x.shape)}")
    if any(s % spec.divisor for s in x.shape[1:]):
        raise IndivisibleShape(f"spatial shape {tuple(x.shape[1:])} not divisible by {spec.divisor}")
    if not torch.isfinite(x).all():
        raise NonFiniteActivation("input")
    return net(x[None])[0]
