from .blocks import (
    AttentionGate,
    AttentionGateSpec,
    ResidualBlock,
    ResidualBlockSpec,
    SqueezeExcite,
    SqueezeExciteSpec,
)
from .models import (
    KINDS,
    DDUNet,
    NetworkSpec,
    ResUNet,
    attn_resunet_spec,
    build_attention_resunet,
    build_ddunet,
    build_network,
    build_segresnet,
    ddunet_spec,
    format_manifest,
    forward,
    parameter_count,
    parameter_manifest,
    segresnet_spec,
)


def attention_gate(x, g, gate: AttentionGate):
    """Gate unbatched ``(C, D, H, W)`` features ``x`` by ``g`` with ``gate``."""
    return gate(x[None], g[None])[0]


def squeeze_excite(x, block: SqueezeExcite):
    return block(x[None])[0]
