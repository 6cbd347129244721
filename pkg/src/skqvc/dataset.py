"""Corpus loading: a directory of WAV files named ``<speaker>_<utt>.wav``."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyDataset
from .features import FeatureSequence, Waveform, compute_mel, load_waveform


@dataclass
class Utterance:
    name: str
    speaker: str
    waveform: Waveform
    features: FeatureSequence | None = None


def speaker_of(name: str) -> str:
    return name.split("_", 1)[0]


def list_wavs(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.wav"))


def load_corpus(directory, encoder=None, names=None) -> list[Utterance]:
    """Load every WAV in ``directory`` (optionally only stems in ``names``) and encode it."""
    paths = list_wavs(directory)
    if names is not None:
        wanted = set(names)
        paths = [p for p in paths if p.stem in wanted]
    if not paths:
        raise EmptyDataset(f"no .wav files in {directory}")
    utts = []
    for p in paths:
        w = load_waveform(p)
        fs = encoder(w) if encoder is not None else None
        utts.append(Utterance(p.stem, speaker_of(p.stem), w, fs))
    return utts


def split_by_speaker(utts, n_heldout_per_speaker=1):
    """Deterministic split: the last ``n`` clips of every speaker are held out."""
    by_spk = {}
    for u in utts:
        by_spk.setdefault(u.speaker, []).append(u)
    train, held = [], []
    for spk in sorted(by_spk):
        items = sorted(by_spk[spk], key=lambda u: u.name)
        cut = max(0, len(items) - n_heldout_per_speaker)
        train.extend(items[:cut])
        held.extend(items[cut:])
    return train, held


def utterance_mel_mean(w: Waveform) -> np.ndarray:
    """Time-averaged log-mel: the desk-scale 'external' speaker embedding (80-dim)."""
    return compute_mel(w).bins.mean(axis=1).astype(np.float64)
