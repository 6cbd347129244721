"""Synthetic multi-speaker corpus for desk-scale experiments.

Each pseudo-speaker has its own pitch range, vocal-tract scaling (formant
shift), spectral tilt and breathiness. Clips are sequences of vowels and
fricatives with smooth formant transitions and a time-varying F0 contour,
rendered by additive harmonic synthesis.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .features import SAMPLE_RATE

VOWELS = {
    "a": (730, 1090, 2440),
    "i": (270, 2290, 3010),
    "u": (300, 870, 2240),
    "e": (530, 1840, 2480),
    "o": (570, 840, 2410),
    "ae": (660, 1720, 2410),
}
BANDWIDTHS = (90.0, 120.0, 180.0)


@dataclass(frozen=True)
class PseudoSpeaker:
    name: str
    f0_base: float
    formant_scale: float
    tilt: float
    breath: float


def make_speakers(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    # spread pitch over ~100-240 Hz on a log grid so speakers are separable
    bases = np.geomspace(100.0, 240.0, n) if n > 1 else np.array([150.0])
    rng.shuffle(bases)
    return [
        PseudoSpeaker(
            name=f"spk{i:02d}",
            f0_base=float(bases[i] * rng.uniform(0.97, 1.03)),
            formant_scale=float(rng.uniform(0.85, 1.2)),
            tilt=float(rng.uniform(0.6, 1.4)),
            breath=float(rng.uniform(0.005, 0.03)),
        )
        for i in range(n)
    ]


def _smooth(x, width):
    if width <= 1:
        return x
    kernel = np.hanning(width)
    kernel /= kernel.sum()
    padded = np.pad(x, (width // 2, width - 1 - width // 2), mode="edge")
    return np.convolve(padded, kernel, mode="valid")


def synthesize_clip(spk: PseudoSpeaker, seconds: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE

    # segment plan: mostly vowels, some fricatives, a few short pauses
    formants = np.zeros((3, n))
    voiced = np.zeros(n)
    fric = np.zeros(n)
    pos = 0
    names = list(VOWELS)
    while pos < n:
        r = rng.uniform()
        if r < 0.7:
            dur = int(rng.uniform(0.09, 0.22) * SAMPLE_RATE)
            f = np.array(VOWELS[names[rng.integers(len(names))]]) * spk.formant_scale
            formants[:, pos:pos + dur] = f[:, None]
            voiced[pos:pos + dur] = 1.0
        elif r < 0.9:
            dur = int(rng.uniform(0.05, 0.11) * SAMPLE_RATE)
            formants[:, pos:pos + dur] = formants[:, pos - 1:pos] if pos else 500.0
            fric[pos:pos + dur] = 1.0
        else:
            dur = int(rng.uniform(0.03, 0.07) * SAMPLE_RATE)
            formants[:, pos:pos + dur] = formants[:, pos - 1:pos] if pos else 500.0
        pos += dur
    formants[formants == 0] = 500.0
    formants = np.stack([_smooth(f, int(0.03 * SAMPLE_RATE)) for f in formants])
    voiced = _smooth(voiced, int(0.015 * SAMPLE_RATE))
    fric = _smooth(fric, int(0.01 * SAMPLE_RATE))

    # F0: declination, a slow intonation wave and a random accent
    phase0 = rng.uniform(0, 2 * np.pi)
    rate = rng.uniform(1.2, 2.5)
    contour = (
        0.12 * np.sin(2 * np.pi * rate * t + phase0)
        - 0.1 * t / max(seconds, 1e-3)
        + 0.06 * np.sin(2 * np.pi * rng.uniform(3.0, 5.0) * t)
    )
    f0 = spk.f0_base * np.exp(contour)

    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    out = np.zeros(n)
    n_harm = int(7600 // f0.min())
    for k in range(1, n_harm + 1):
        fk = k * f0
        # cascade of two-pole resonators: unity gain below F1, peaks of F/B at each formant
        amp = k ** (-spk.tilt) * np.ones(n)
        for i in range(3):
            r = fk / formants[i]
            amp /= np.sqrt((1.0 - r ** 2) ** 2 + (fk * BANDWIDTHS[i] / formants[i] ** 2) ** 2)
        amp[fk > 7800] = 0.0
        out += amp * np.sin(k * phase)
    out *= voiced

    noise = rng.standard_normal(n)
    b, a = signal.butter(4, [2500 / 8000, 7000 / 8000], btype="band")
    hiss = signal.lfilter(b, a, noise)
    out = out / (np.abs(out).max() + 1e-9)
    out += 0.35 * hiss / (np.abs(hiss).max() + 1e-9) * fric
    out += spk.breath * noise * voiced
    out /= np.abs(out).max() + 1e-9
    return (0.9 * out).astype(np.float32)


def make_toy_corpus(out_dir, n_speakers=4, clips_per_speaker=10, seconds=(1.0, 1.6), seed=0):
    """Write ``spkNN_MMM.wav`` files into ``out_dir`` and return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for spk in make_speakers(n_speakers, seed):
        for j in range(clips_per_speaker):
            dur = rng.uniform(*seconds) if isinstance(seconds, tuple) else float(seconds)
            x = synthesize_clip(spk, dur, rng)
            p = out_dir / f"{spk.name}_{j:03d}.wav"
            wavfile.write(p, SAMPLE_RATE, (x * 32767).astype(np.int16))
            paths.append(p)
    return paths
