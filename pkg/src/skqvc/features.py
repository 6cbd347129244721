"""Waveform I/O, log-mel spectrograms, SKQF feature files and the pseudo-encoder.

One STFT definition is used repo-wide: the mel loss in the decoder and the
pseudo-encoder both call :func:`log_mel`.
"""

from __future__ import annotations

import functools
import math
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import signal
from scipy.io import wavfile

from .errors import (
    AudioTooShort,
    BadMagic,
    DimMismatch,
    EmptyAudio,
    EmptySequence,
    InvalidConfig,
    NonFiniteValue,
    UnreadableFile,
    UnsupportedFormat,
)

SAMPLE_RATE = 16000
HOP = 320
FEATURE_DIM = 1024
LOG_FLOOR = 1e-5

SKQF_MAGIC = b"SKQF"
SKQF_HEADER = struct.Struct("<4sHIIB3s")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)

    @property
    def length(self) -> int:
        return int(self.samples.shape[0])

    def __len__(self):
        return self.length


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 1280
    win_length: int = 1280
    hop: int = HOP
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    sample_rate: int = SAMPLE_RATE

    def validate(self):
        if self.hop < 1 or self.hop > self.win_length:
            raise InvalidConfig(f"hop {self.hop} must be in [1, win_length={self.win_length}]")
        if self.win_length > self.n_fft:
            raise InvalidConfig("win_length must not exceed n_fft")
        if self.n_mels < 1:
            raise InvalidConfig("n_mels must be >= 1")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise InvalidConfig("need 0 <= fmin < fmax <= sample_rate / 2")
        return self


@dataclass
class MelSpectrogram:
    bins: np.ndarray
    n_mels: int = 80
    frame_hop: int = HOP

    @property
    def frames(self) -> int:
        return int(self.bins.shape[1])


@dataclass
class FeatureSequence:
    """Continuous frame features, stored ``dim x T`` as float32."""

    values: np.ndarray
    frame_rate: float = SAMPLE_RATE / HOP
    source_tag: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DimMismatch(f"features must be 2-D (dim, T), got shape {self.values.shape}")
        if self.values.shape[1] < 1:
            raise EmptySequence("feature sequence has no frames")
        if not np.isfinite(self.values).all():
            raise NonFiniteValue("feature sequence contains non-finite values")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @property
    def T(self) -> int:
        return int(self.values.shape[1])


# ---------------------------------------------------------------------------
# waveform I/O


def load_waveform(path) -> Waveform:
    """Read a PCM/float WAV file as mono 16 kHz audio, peak-normalized to 1."""
    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"no such file: {path}")
    try:
        sr, data = wavfile.read(path)
    except ValueError as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from exc
    except OSError as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc

    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.integer):
        x = data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    elif np.issubdtype(data.dtype, np.floating):
        x = data.astype(np.float64)
    else:
        raise UnsupportedFormat(f"{path}: sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise EmptyAudio(f"{path}: zero samples")
    if not np.isfinite(x).all():
        raise UnsupportedFormat(f"{path}: non-finite samples")

    if sr != SAMPLE_RATE:
        g = math.gcd(int(sr), SAMPLE_RATE)
        x = signal.resample_poly(x, SAMPLE_RATE // g, int(sr) // g)
    peak = np.abs(x).max()
    if peak > 0:
        x = x / peak
    return Waveform(x.astype(np.float32), SAMPLE_RATE, source=str(path))


def write_waveform(path, w: Waveform):
    """Write ``w`` as a 32-bit float WAV file."""
    wavfile.write(path, w.sample_rate, np.asarray(w.samples, dtype=np.float32))


# ---------------------------------------------------------------------------
# STFT / mel


def _hz_to_mel(f):
    # Slaney scale: linear below 1 kHz, logarithmic above.
    f = np.asarray(f, dtype=np.float64)
    lin = f / (200.0 / 3)
    logstep = math.log(6.4) / 27.0
    return np.where(f >= 1000.0, 15.0 + np.log(np.maximum(f, 1e-12) / 1000.0) / logstep, lin)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    logstep = math.log(6.4) / 27.0
    return np.where(m >= 15.0, 1000.0 * np.exp(logstep * (m - 15.0)), m * (200.0 / 3))


@functools.lru_cache(maxsize=16)
def mel_filterbank(cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Slaney-normalized triangular filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    cfg.validate()
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (hz_pts[2:] - hz_pts[:-2]))[:, None]
    return weights


def mel_center_frequencies(cfg: StftConfig = StftConfig()) -> np.ndarray:
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return _mel_to_hz(mel_pts[1:-1])


def reflect_pad(x: torch.Tensor, pad: int) -> torch.Tensor:
    """Reflect-pad the last axis by ``pad`` on both sides.

    Unlike ``F.pad(mode="reflect")`` this accepts ``pad >= length`` by
    reflecting repeatedly.
    """
    n = x.shape[-1]
    if pad == 0:
        return x
    idx = torch.arange(-pad, n + pad, device=x.device)
    if n == 1:
        idx = torch.zeros_like(idx)
    else:
        period = 2 * (n - 1)
        idx = torch.remainder(idx, period)
        idx = torch.where(idx >= n, period - idx, idx)
    return x.index_select(-1, idx)


@functools.lru_cache(maxsize=16)
def _window_np(win_length: int) -> np.ndarray:
    return torch.hann_window(win_length, periodic=True, dtype=torch.float64).numpy()


def n_frames(length: int, hop: int = HOP) -> int:
    return length // hop


def log_mel(audio: torch.Tensor, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Differentiable log-mel of ``audio`` with shape ``(..., L)``.

    Returns ``(..., n_mels, L // hop)``. Padding is reflective with
    ``(n_fft - hop) / 2`` samples per side so that the frame count is exactly
    ``L // hop``.
    """
    cfg.validate()
    lead = audio.shape[:-1]
    length = audio.shape[-1]
    frames = n_frames(length, cfg.hop)
    if frames == 0:
        return audio.new_zeros(*lead, cfg.n_mels, 0)
    x = audio.reshape(-1, length)
    pad = (cfg.n_fft - cfg.hop) // 2
    x = reflect_pad(x, pad)
    window = torch.from_numpy(_window_np(cfg.win_length)).to(x.dtype)
    spec = torch.stft(
        x,
        n_fft=cfg.n_fft,
        hop_length=cfg.hop,
        win_length=cfg.win_length,
        window=window,
        center=False,
        return_complex=True,
    )
    mag = torch.sqrt(spec.real.pow(2) + spec.imag.pow(2) + 1e-9)
    fb = torch.from_numpy(mel_filterbank(cfg)).to(x.dtype)
    mel = torch.matmul(fb, mag)
    out = torch.log(torch.clamp(mel, min=LOG_FLOOR))
    return out[..., :frames].reshape(*lead, cfg.n_mels, frames)


def compute_mel(w: Waveform, cfg: StftConfig = StftConfig()) -> MelSpectrogram:
    cfg.validate()
    if w.length < 1:
        raise EmptyAudio("waveform has no samples")
    with torch.no_grad():
        bins = log_mel(torch.from_numpy(w.samples), cfg).numpy()
    return MelSpectrogram(bins, cfg.n_mels, cfg.hop)


# ---------------------------------------------------------------------------
# SKQF feature files


def write_features(path, fs: FeatureSequence):
    """Write ``fs`` in SKQF layout (header + frame-major little-endian f32)."""
    header = SKQF_HEADER.pack(SKQF_MAGIC, 1, fs.dim, fs.T, 0, b"\x00\x00\x00")
    payload = np.ascontiguousarray(fs.values.T, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_features(path) -> FeatureSequence:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    if len(raw) < SKQF_HEADER.size or raw[:4] != SKQF_MAGIC:
        raise BadMagic(f"{path}: not an SKQF file")
    _, version, dim, frames, dtype, reserved = SKQF_HEADER.unpack_from(raw)
    if version != 1 or dtype != 0 or reserved != b"\x00\x00\x00":
        raise UnsupportedFormat(f"{path}: version={version} dtype={dtype} reserved={reserved!r}")
    payload = raw[SKQF_HEADER.size:]
    if len(payload) != dim * frames * 4:
        raise DimMismatch(
            f"{path}: header declares {dim}x{frames} but payload holds {len(payload)} bytes"
        )
    if dim == 0 or frames == 0:
        raise EmptySequence(f"{path}: empty feature matrix")
    values = np.frombuffer(payload, dtype="<f4").reshape(frames, dim).T
    if not np.isfinite(values).all():
        raise NonFiniteValue(f"{path}: non-finite feature values")
    return FeatureSequence(values.astype(np.float32), source_tag=str(path))


# ---------------------------------------------------------------------------
# pseudo-encoder


def deltas(m: np.ndarray) -> np.ndarray:
    """First-order central differences along time, edges replicated."""
    padded = np.concatenate([m[:, :1], m, m[:, -1:]], axis=1)
    return (padded[:, 2:] - padded[:, :-2]) / 2.0


@functools.lru_cache(maxsize=8)
def _projection(seed: int, in_rows: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((dim, in_rows)) / math.sqrt(in_rows)
    proj.setflags(write=False)
    return proj


def pseudo_encode(
    w: Waveform, seed: int, dim: int = FEATURE_DIM, use_deltas: bool = True
) -> FeatureSequence:
    """Deterministic stand-in for an SSL encoder.

    Log-mel (80 rows) plus first-order deltas (80 rows), mapped to ``dim``
    by a fixed Gaussian matrix scaled by ``1/sqrt(rows)``. One output column
    per mel frame, so nearby frames in mel space stay nearby in feature space.
    """
    cfg = StftConfig()
    if w.length < cfg.n_fft:
        raise AudioTooShort(f"need at least {cfg.n_fft} samples, got {w.length}")
    mel = compute_mel(w, cfg).bins.astype(np.float64)
    rows = np.concatenate([mel, deltas(mel)], axis=0) if use_deltas else mel
    proj = _projection(int(seed), rows.shape[0], dim)
    # Broadcast-multiply and reduce rather than matmul: every output column
    # then goes through the same arithmetic regardless of its position.
    values = np.einsum("dr,rt->dt", proj, rows, optimize=False)
    tag = f"pseudo({seed})" if use_deltas else f"pseudo-nodelta({seed})"
    return FeatureSequence(values.astype(np.float32), source_tag=tag)


class PseudoEncoder:
    def __init__(self, seed: int = 0, use_deltas: bool = True, dim: int = FEATURE_DIM):
        self.seed = int(seed)
        self.use_deltas = use_deltas
        self.dim = dim

    @property
    def spec(self) -> str:
        return f"pseudo({self.seed})" if self.use_deltas else f"pseudo-nodelta({self.seed})"

    def __call__(self, w: Waveform) -> FeatureSequence:
        return pseudo_encode(w, self.seed, self.dim, self.use_deltas)


class SkqfDirEncoder:
    """Looks up precomputed features ``<dir>/<stem>.skqf`` for a loaded waveform."""

    def __init__(self, directory):
        self.directory = Path(directory)

    @property
    def spec(self) -> str:
        return f"skqf({self.directory})"

    def __call__(self, w: Waveform) -> FeatureSequence:
        if not w.source:
            raise UnreadableFile("waveform has no source path; cannot locate its SKQF file")
        return load_features(self.directory / (Path(w.source).stem + ".skqf"))


_ENCODER_RE = re.compile(r"^\s*(pseudo|pseudo-nodelta|skqf)\((.*)\)\s*$")


def make_encoder(spec: str):
    """Build an encoder from ``pseudo(7)``, ``pseudo-nodelta(7)`` or ``skqf(dir)``."""
    m = _ENCODER_RE.match(spec)
    if not m:
        raise InvalidConfig(f"unknown encoder spec {spec!r}")
    kind, arg = m.groups()
    if kind == "skqf":
        return SkqfDirEncoder(os.path.expanduser(arg))
    try:
        seed = int(arg)
    except ValueError as exc:
        raise InvalidConfig(f"encoder seed must be an integer: {spec!r}") from exc
    return PseudoEncoder(seed, use_deltas=(kind == "pseudo"))
