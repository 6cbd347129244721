"""Residual split into speaker and speaking-variation parts.

The quantization residual ``S = W - Q`` carries what the content codebook
threw away. Its time average is the speaker embedding; what is left after
subtracting that average goes through a narrow per-frame projection (the
variation path) and is concatenated onto a projection of ``Q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .codebook import Codebook, QuantizedSequence, ResidualSequence, quantize, residual
from .errors import DimMismatch, EmptySequence, InvalidConfig, LengthMismatch, ShapeMismatch
from .features import FeatureSequence

# How the time-variant part of the residual reaches the decoder.
#   "svcomp"   : bottlenecked variation V concatenated to projected Q (full model)
#   "residual" : no bottleneck, C = Q + (S - S_avg)
#   "none"     : no compensation at all, C = Q
VARIATION_MODES = ("svcomp", "residual", "none")


@dataclass
class SpeakerEmbedding:
    values: np.ndarray  # (dim,) float64


@dataclass
class VariationEmbedding:
    values: torch.Tensor  # (d_v, T)


@dataclass
class ContentEmbedding:
    values: torch.Tensor  # (dim, T); rows [0, d_c) content, [d_c, dim) variation
    d_c: int

    @property
    def T(self) -> int:
        return int(self.values.shape[-1])


@dataclass
class DisentangledSpeech:
    C: ContentEmbedding
    s_avg: SpeakerEmbedding
    Q: QuantizedSequence
    S: ResidualSequence
    V: VariationEmbedding | None

    @property
    def indices(self) -> np.ndarray:
        return self.Q.indices


def _fan_in_uniform_(conv: nn.Conv1d, gen: torch.Generator):
    bound = 1.0 / math.sqrt(conv.in_channels * conv.kernel_size[0])
    with torch.no_grad():
        conv.weight.uniform_(-bound, bound, generator=gen)
        conv.bias.uniform_(-bound, bound, generator=gen)


class DisentanglerParams(nn.Module):
    """The two kernel-1 bottleneck convolutions (per-frame affine maps)."""

    def __init__(self, dim: int = 1024, d_v: int = 8, seed: int = 0, mode: str = "svcomp"):
        super().__init__()
        if not 0 < d_v < dim:
            raise InvalidConfig(f"need 0 < d_v < dim, got d_v={d_v}, dim={dim}")
        if mode not in VARIATION_MODES:
            raise InvalidConfig(f"unknown variation mode {mode!r}")
        self.dim = dim
        self.d_v = d_v
        self.mode = mode
        self.svcomp_proj = nn.Conv1d(dim, d_v, 1)
        self.content_proj = nn.Conv1d(dim, dim - d_v, 1)
        gen = torch.Generator().manual_seed(int(seed))
        _fan_in_uniform_(self.svcomp_proj, gen)
        _fan_in_uniform_(self.content_proj, gen)

    @property
    def d_c(self) -> int:
        return self.dim - self.d_v

    @property
    def dtype(self) -> torch.dtype:
        return self.content_proj.weight.dtype


def speaker_embedding(S: ResidualSequence) -> SpeakerEmbedding:
    if S.values.ndim != 2 or S.values.shape[1] < 1:
        raise EmptySequence("residual has no frames")
    # fsum is correctly rounded, so the average does not depend on frame order
    T = S.values.shape[1]
    return SpeakerEmbedding(np.array([math.fsum(row) for row in S.values]) / T)


def _centered(S: ResidualSequence, s_avg: SpeakerEmbedding) -> np.ndarray:
    if S.values.shape[0] != s_avg.values.shape[0]:
        raise ShapeMismatch(f"residual dim {S.values.shape[0]} vs speaker dim {s_avg.values.shape[0]}")
    return S.values - s_avg.values[:, None]


def svcomp(S: ResidualSequence, s_avg: SpeakerEmbedding, p: DisentanglerParams) -> VariationEmbedding:
    x = _centered(S, s_avg)
    if x.shape[0] != p.dim:
        raise ShapeMismatch(f"residual dim {x.shape[0]} vs params dim {p.dim}")
    v = p.svcomp_proj(torch.from_numpy(x).to(p.dtype).unsqueeze(0))[0]
    return VariationEmbedding(v)


def build_content(Q: QuantizedSequence, V: VariationEmbedding, p: DisentanglerParams) -> ContentEmbedding:
    T = Q.vectors.shape[1]
    if V.values.shape[-1] != T:
        raise LengthMismatch(f"Q has {T} frames, V has {V.values.shape[-1]}")
    if Q.vectors.shape[0] != p.dim or V.values.shape[0] != p.d_v:
        raise ShapeMismatch("Q/V dims do not match the bottleneck parameters")
    q = torch.from_numpy(Q.vectors).to(p.dtype).unsqueeze(0)
    c = torch.cat([p.content_proj(q)[0], V.values.to(p.dtype)], dim=0)
    return ContentEmbedding(c, p.d_c)


def recombine(C: ContentEmbedding, s_avg: SpeakerEmbedding | torch.Tensor) -> torch.Tensor:
    """Decoder input: ``C`` plus the speaker vector broadcast over time, shape ``(dim, T)``."""
    spk = s_avg if isinstance(s_avg, torch.Tensor) else torch.from_numpy(s_avg.values)
    if spk.shape[-1] != C.values.shape[0]:
        raise DimMismatch(f"content dim {C.values.shape[0]} vs speaker dim {spk.shape[-1]}")
    return C.values + spk.to(C.values.dtype).unsqueeze(-1)


def disentangle_quantized(
    W: FeatureSequence, Q: QuantizedSequence, p: DisentanglerParams
) -> DisentangledSpeech:
    """Everything after quantization; shared by training, conversion and :func:`disentangle`."""
    S = residual(W, Q)
    s_avg = speaker_embedding(S)
    if p.mode == "svcomp":
        V = svcomp(S, s_avg, p)
        C = build_content(Q, V, p)
    elif p.mode == "residual":
        V = None
        centered = torch.from_numpy(_centered(S, s_avg)).to(p.dtype)
        C = ContentEmbedding(torch.from_numpy(Q.vectors).to(p.dtype) + centered, p.dim)
    else:
        V = None
        C = ContentEmbedding(torch.from_numpy(Q.vectors).to(p.dtype), p.dim)
    return DisentangledSpeech(C, s_avg, Q, S, V)


def disentangle(W: FeatureSequence, cb: Codebook, p: DisentanglerParams) -> DisentangledSpeech:
    """quantize -> residual -> speaker_embedding -> svcomp -> build_content."""
    if W.dim != cb.dim:
        raise DimMismatch(f"feature dim {W.dim} != codebook dim {cb.dim}")
    return disentangle_quantized(W, quantize(W, cb), p)
