"""Majority-vote fusion of three hard predictions and restoration to the original grid."""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from .errors import GridMismatch, WrongMemberCount
from .preprocess import one_hot_decode
from .train import predict_probs, predict_subject
from .volume_io import LabelMask, MultiModalVolume, pad_to_original

N_MEMBERS = 3


@dataclasses.dataclass(frozen=True)
class EnsembleInput:
    members: Sequence[LabelMask]
    reference_index: int = 0

    def __post_init__(self):
        members = tuple(self.members)
        if len(members) != N_MEMBERS:
            raise WrongMemberCount(f"majority vote needs exactly {N_MEMBERS} members, got {len(members)}")
        if self.reference_index not in range(N_MEMBERS):
            raise ValueError(f"reference_index must be 0, 1 or 2, got {self.reference_index}")
        first = members[0]
        for m in members[1:]:
            if m.shape != first.shape:
                raise GridMismatch(f"member shapes differ: {m.shape} vs {first.shape}")
            if (m.meta.crop_offset != first.meta.crop_offset
                    or tuple(m.meta.original_shape) != tuple(first.meta.original_shape)
                    or not np.allclose(m.meta.affine, first.meta.affine, rtol=0, atol=1e-4)):
                raise GridMismatch("members carry different spatial metadata")
        object.__setattr__(self, "members", members)


def majority_vote(inp: EnsembleInput) -> LabelMask:
    """Label chosen by at least two members; the reference member breaks 3-way ties."""
    a, b, c = (m.data for m in inp.members)
    ref = inp.members[inp.reference_index].data
    out = np.where((a == b) | (a == c), a, np.where(b == c, b, ref))
    return LabelMask(out.astype(np.uint8), inp.members[0].meta)


def restore(mask: LabelMask) -> LabelMask:
    """Pad back to the original grid; no-op for masks that were never cropped."""
    if mask.meta.crop_offset is None:
        return mask
    return pad_to_original(mask)


def ensemble_predict(nets: Sequence, vol: MultiModalVolume, reference_index: int = 0,
                     mode: str = "vote") -> LabelMask:
    """Predict with three networks, fuse, and pad to ``vol.meta.original_shape``.

    ``mode='vote'`` is hard majority voting. ``mode='mean_prob'`` averages
    softmax outputs before the argmax and exists for ablations only.
    """
    if len(nets) != N_MEMBERS:
        raise WrongMemberCount(f"need exactly {N_MEMBERS} networks, got {len(nets)}")
    if mode == "vote":
        members = [predict_subject(net, vol) for net in nets]
        fused = majority_vote(EnsembleInput(members, reference_index))
    elif mode == "mean_prob":
        probs = np.mean([predict_probs(net, vol) for net in nets], axis=0)
        fused = one_hot_decode(probs, meta=vol.meta)
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return restore(fused)

