"""One-shot conversion: content from the source clip, speaker from the target clip."""

from __future__ import annotations

import numpy as np
import torch

from .codebook import Codebook, quantize, residual
from .decoder import generate
from .disentangler import speaker_embedding
from .errors import DimMismatch, IncompatibleCheckpoint
from .features import FeatureSequence, Waveform
from .training import Checkpoint


def _features(x, encoder) -> FeatureSequence:
    if isinstance(x, FeatureSequence):
        return x
    if encoder is None:
        raise TypeError("a waveform input needs an encoder")
    return encoder(x)


def target_speaker(target, cb: Codebook, encoder=None) -> np.ndarray:
    """Residual average of the whole target utterance, ``(dim,)`` float64."""
    W = _features(target, encoder)
    if W.dim != cb.dim:
        raise DimMismatch(f"target feature dim {W.dim} != codebook dim {cb.dim}")
    return speaker_embedding(residual(W, quantize(W, cb))).values


def conversion_input(source, target, ckpt: Checkpoint, cb: Codebook, encoder=None,
                     speaker_vector=None) -> torch.Tensor:
    """Generator input ``(dim, T_src)`` for converting ``source`` to the voice of ``target``.

    The source is quantized once; the target only contributes its speaker
    vector. ``speaker_vector`` replaces the target entirely (external
    speaker embeddings go through the model's adapter).
    """
    if cb.checksum() != ckpt.codebook_checksum:
        raise IncompatibleCheckpoint("codebook checksum does not match the one the model was trained with")
    W = _features(source, encoder)
    if W.dim != cb.dim:
        raise DimMismatch(f"source feature dim {W.dim} != codebook dim {cb.dim}")
    if speaker_vector is None:
        speaker_vector = target_speaker(target, cb, encoder)
    with torch.no_grad():
        return ckpt.model.decoder_input(W, quantize(W, cb), speaker_vector)


def convert(source: Waveform | FeatureSequence, target: Waveform | FeatureSequence | None,
            ckpt: Checkpoint, cb: Codebook, encoder=None, speaker_vector=None) -> Waveform:
    """Converted waveform of length ``T_src * 320``."""
    ckpt.model.eval()
    z = conversion_input(source, target, ckpt, cb, encoder, speaker_vector)
    with torch.no_grad():
        return generate(z, ckpt.model.generator)
