"""Objective metrics and the codebook-size / ablation experiment harnesses.

``code_agreement`` and ``speaker_cosine`` are offline proxies for
ASR-based WER/CER and SV-based EER. They are reported under their own
names and are not comparable to those metrics.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import signal

from .codebook import Codebook, fit_codebook, quantization_mse, quantize, residual
from .dataset import Utterance, load_corpus, split_by_speaker, utterance_mel_mean
from .disentangler import speaker_embedding
from .errors import AudioTooShort, InsufficientVoicedOverlap, InvalidConfig, ZeroVector
from .features import HOP, Waveform, compute_mel, make_encoder, reflect_pad

log = logging.getLogger(__name__)

F0_FRAME = 1280
F0_MIN = 50.0
F0_MAX = 600.0
VOICING_THRESHOLD = 0.3
LOWPASS_HZ = 1000.0
CONSISTENCY_RADIUS = 2
CONSISTENCY_TOLERANCE = 0.25


@dataclass
class F0Track:
    values: np.ndarray  # Hz per frame, 0 = unvoiced
    hop: int = HOP

    @property
    def voiced(self) -> np.ndarray:
        return self.values > 0


def extract_f0(
    w: Waveform,
    fmin: float = F0_MIN,
    fmax: float = F0_MAX,
    threshold: float = VOICING_THRESHOLD,
) -> F0Track:
    """Normalized-autocorrelation pitch per 320-sample hop.

    The signal is low-passed at 1 kHz; each frame spans 1280 samples
    centred like the mel frames. The first
    ``1280 - max_lag`` samples are correlated against lagged copies; the
    normalized peak picks the period, and frames whose peak is below
    ``threshold`` are unvoiced. Octave-down errors are avoided by taking the
    shortest lag whose score is within 3% of the best one. Finally, a voiced
    frame that disagrees by more than 25% with the median of the voiced
    frames within two hops of it is declared unvoiced (isolated jumps are
    tracking errors, not intonation).
    """
    if w.length < F0_FRAME:
        raise AudioTooShort(f"need at least {F0_FRAME} samples, got {w.length}")
    sr = w.sample_rate
    min_lag = int(np.floor(sr / fmax))
    max_lag = int(np.ceil(sr / fmin))
    n_win = F0_FRAME - max_lag
    # low-pass first so fricative noise does not masquerade as short periods
    sos = signal.butter(4, LOWPASS_HZ, btype="low", fs=sr, output="sos")
    x = torch.from_numpy(signal.sosfiltfilt(sos, w.samples.astype(np.float64)).copy())
    padded = reflect_pad(x, (F0_FRAME - HOP) // 2).numpy()
    n = w.length // HOP
    frames = np.lib.stride_tricks.sliding_window_view(padded, F0_FRAME)[::HOP][:n]
    frames = frames - frames.mean(axis=1, keepdims=True)

    head = frames[:, :n_win]
    e0 = np.einsum("ij,ij->i", head, head)
    sq = np.concatenate([np.zeros((n, 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    lags = np.arange(min_lag, max_lag + 1)
    score = np.zeros((n, lags.size))
    for j, lag in enumerate(lags):
        num = np.einsum("ij,ij->i", head, frames[:, lag:lag + n_win])
        e1 = sq[:, lag + n_win] - sq[:, lag]
        den = np.sqrt(e0 * e1)
        score[:, j] = np.where(den > 1e-12, num / np.maximum(den, 1e-300), 0.0)

    f0 = np.zeros(n)
    for i in range(n):
        s = score[i]
        best = s.max()
        if best < threshold:
            continue
        # local maxima only, then the earliest one close to the global best
        peaks = np.flatnonzero((s[1:-1] >= s[:-2]) & (s[1:-1] >= s[2:])) + 1
        peaks = peaks[s[peaks] >= 0.97 * best]
        j = int(peaks[0]) if peaks.size else int(np.argmax(s))
        shift = 0.0
        if 0 < j < s.size - 1:
            a, b, c = s[j - 1], s[j], s[j + 1]
            denom = a - 2 * b + c
            if denom < 0:
                shift = 0.5 * (a - c) / denom
        hz = sr / (lags[j] + shift)
        if fmin <= hz <= fmax:
            f0[i] = hz
    return F0Track(_drop_inconsistent(f0), HOP)


def _drop_inconsistent(f0: np.ndarray, radius: int = CONSISTENCY_RADIUS,
                       tolerance: float = CONSISTENCY_TOLERANCE) -> np.ndarray:
    out = f0.copy()
    for i in np.flatnonzero(f0 > 0):
        window = f0[max(0, i - radius):i + radius + 1]
        med = np.median(window[window > 0])
        if abs(f0[i] - med) > tolerance * med:
            out[i] = 0.0
    return out


def f0_track_pcc(a: F0Track, b: F0Track, min_overlap: int = 2) -> float:
    """Pearson correlation over frames voiced in both tracks (truncated to the shorter)."""
    n = min(a.values.size, b.values.size)
    va, vb = a.values[:n], b.values[:n]
    both = (va > 0) & (vb > 0)
    if both.sum() < min_overlap:
        raise InsufficientVoicedOverlap(f"only {int(both.sum())} mutually voiced frames")
    x = va[both] - va[both].mean()
    y = vb[both] - vb[both].mean()
    den = np.sqrt((x * x).sum() * (y * y).sum())
    if den == 0:
        raise InsufficientVoicedOverlap("F0 is constant over the voiced overlap; correlation undefined")
    return float(np.clip((x * y).sum() / den, -1.0, 1.0))


def f0_pcc(a: Waveform, b: Waveform) -> float:
    return f0_track_pcc(extract_f0(a), extract_f0(b))


def code_agreement(src: Waveform, conv: Waveform, cb: Codebook, enc) -> float:
    """Fraction of frames whose codebook index is the same for both clips."""
    ia = quantize(enc(src), cb).indices
    ib = quantize(enc(conv), cb).indices
    n = min(ia.size, ib.size)
    return float(np.mean(ia[:n] == ib[:n]))


def residual_speaker(w: Waveform, cb: Codebook, enc) -> np.ndarray:
    W = enc(w)
    return speaker_embedding(residual(W, quantize(W, cb))).values


def speaker_cosine(a: Waveform, b: Waveform, cb: Codebook, enc) -> float:
    sa = residual_speaker(a, cb, enc)
    sb = residual_speaker(b, cb, enc)
    na, nb = np.linalg.norm(sa), np.linalg.norm(sb)
    if na < 1e-12 or nb < 1e-12:
        raise ZeroVector("speaker embedding has (near) zero norm")
    return float(np.clip(sa @ sb / (na * nb), -1.0, 1.0))


def auc(positive, negative) -> float:
    """Probability that a random positive score beats a random negative (ties count half)."""
    p = np.asarray(positive, dtype=np.float64)[:, None]
    n = np.asarray(negative, dtype=np.float64)[None, :]
    return float(np.mean((p > n) + 0.5 * (p == n)))


def mel_l1(a: Waveform, b: Waveform) -> float:
    """Mean absolute log-mel difference after truncating to the shorter clip."""
    n = min(a.length, b.length)
    ma = compute_mel(Waveform(a.samples[:n])).bins
    mb = compute_mel(Waveform(b.samples[:n])).bins
    return float(np.mean(np.abs(ma.astype(np.float64) - mb)))


# ---------------------------------------------------------------------------
# experiment harness

SWEEP_SIZES = (128, 256, 512, 1024, 4096, 8192)


@dataclass
class Budget:
    """Everything that is held equal across the cells of one experiment."""

    steps: int = 600
    batch_size: int = 4
    segment_frames: int = 32
    lr: float = 2e-4
    gen_channels: int = 64
    gen_resblock_kernels: tuple = (3,)
    disc_scale: float = 1 / 16
    codebook_iters: int = 30
    seed: int = 0
    encoder: str = "pseudo(0)"
    heldout_per_speaker: int = 2
    eval_k: int = 256

    def train_config(self, **overrides):
        from .training import TrainConfig

        kw = dict(
            lr=self.lr,
            batch_size=self.batch_size,
            segment_frames=self.segment_frames,
            max_steps=self.steps,
            seed=self.seed,
            gen_channels=self.gen_channels,
            gen_resblock_kernels=tuple(self.gen_resblock_kernels),
            disc_scale=self.disc_scale,
            encoder=self.encoder,
        )
        kw.update(overrides)
        return TrainConfig(**kw)


class _Corpus:
    """Train/held-out split with per-encoder feature caches."""

    def __init__(self, dataset, budget: Budget):
        utts = load_corpus(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
        self.train, self.held = split_by_speaker(utts, budget.heldout_per_speaker)
        if not self.train or not self.held:
            raise InvalidConfig("need at least one training and one held-out clip per speaker")
        self.budget = budget
        self._features = {}
        self._eval_cb = None
        self._speakers = {}

    def encoded(self, spec: str, which: str):
        key = (spec, which)
        if key not in self._features:
            enc = make_encoder(spec)
            src = self.train if which == "train" else self.held
            self._features[key] = [Utterance(u.name, u.speaker, u.waveform, enc(u.waveform)) for u in src]
        return self._features[key]

    @property
    def base_encoder(self):
        return make_encoder(self.budget.encoder)

    def eval_codebook(self) -> Codebook:
        """Fixed codebook for the proxy metrics, shared by every cell."""
        if self._eval_cb is None:
            feats = [u.features for u in self.encoded(self.budget.encoder, "train")]
            # at least four frames per centroid, so reference residuals are never all zero
            k = min(self.budget.eval_k, max(1, sum(f.T for f in feats) // 4))
            self._eval_cb = fit_codebook(feats, K=k, seed=self.budget.seed,
                                         max_iters=self.budget.codebook_iters, training_tag="eval")
        return self._eval_cb

    def speaker_vector(self, w: Waveform) -> np.ndarray:
        key = id(w)
        if key not in self._speakers:
            self._speakers[key] = (w, residual_speaker(w, self.eval_codebook(), self.base_encoder))
        return self._speakers[key][1]

    def pairs(self):
        """(source, target) held-out pairs with different speakers, deterministic."""
        held = self.held
        out = []
        for i, src in enumerate(held):
            for j in range(1, len(held)):
                tgt = held[(i + j) % len(held)]
                if tgt.speaker != src.speaker:
                    out.append((i, (i + j) % len(held)))
                    break
        return out

    def references(self):
        """One training clip per speaker as the speaker-similarity reference."""
        refs = {}
        for u in self.train:
            refs.setdefault(u.speaker, u)
        return refs


def _cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise ZeroVector("speaker embedding has (near) zero norm")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _mean_or_nan(values) -> float:
    return float(np.mean(values)) if values else float("nan")


def evaluate_checkpoint(ckpt, cb: Codebook, corpus: _Corpus, feature_spec: str) -> dict:
    """Reconstruction and conversion metrics on the held-out clips.

    ``recon_mel_l1`` compares each held-out clip with its own reconstruction.
    ``f0_pcc``, ``code_agreement`` and ``speaker_auc`` are measured on
    conversions to a held-out clip of another speaker; the last two are
    offline proxies computed with the shared evaluation codebook.
    """
    from .conversion import convert

    external = ckpt.model.speaker_adapter is not None
    held = corpus.encoded(feature_spec, "held")
    eval_cb = corpus.eval_codebook()
    base = corpus.base_encoder

    def run(src, tgt):
        spk = utterance_mel_mean(tgt.waveform) if external else None
        return convert(src.features, tgt.features, ckpt, cb, speaker_vector=spk)

    mel = [mel_l1(u.waveform, run(u, u)) for u in held]

    f0, agree, pos, neg = [], [], [], []
    refs = corpus.references()
    ref_vecs = {spk: corpus.speaker_vector(u.waveform) for spk, u in refs.items()}
    for i, j in corpus.pairs():
        src, tgt = held[i], held[j]
        y = run(src, tgt)
        try:
            f0.append(f0_pcc(src.waveform, y))
        except InsufficientVoicedOverlap:
            log.info("no F0 overlap for %s -> %s", src.name, tgt.name)
        agree.append(code_agreement(src.waveform, y, eval_cb, base))
        v = residual_speaker(y, eval_cb, base)
        for spk, r in ref_vecs.items():
            (pos if spk == tgt.speaker else neg).append(_cosine(v, r))
    return {
        "recon_mel_l1": _mean_or_nan(mel),
        "f0_pcc": _mean_or_nan(f0),
        "code_agreement": _mean_or_nan(agree),
        "speaker_auc": auc(pos, neg) if pos and neg else float("nan"),
    }


def _train_cell(corpus: _Corpus, cb: Codebook, cfg, feature_spec: str):
    from .training import fit

    t0 = time.perf_counter()
    ckpt = fit(corpus.encoded(feature_spec, "train"), cfg, codebook=cb)
    log.info("trained cell in %.1fs", time.perf_counter() - t0)
    return ckpt


def _svcomp_settings(with_svcomp):
    if with_svcomp == "both":
        return (True, False)
    if isinstance(with_svcomp, (list, tuple)):
        return tuple(bool(v) for v in with_svcomp)
    return (bool(with_svcomp),)


def sweep_codebook_sizes(sizes, with_svcomp, dataset, budget: Budget = Budget()) -> list[dict]:
    """Train one model per (K, svcomp) cell under an identical budget.

    ``with_svcomp`` is ``True``, ``False`` or ``"both"``. The codebook for a
    given K is fitted once on the training split and shared by both svcomp
    settings, so the two cells differ only in the variation path.
    """
    sizes = [int(k) for k in sizes]
    if not sizes or min(sizes) < 1:
        raise InvalidConfig(f"codebook sizes must be positive, got {sizes}")
    corpus = dataset if isinstance(dataset, _Corpus) else _Corpus(dataset, budget)
    train_feats = [u.features for u in corpus.encoded(budget.encoder, "train")]
    rows = []
    for K in sizes:
        cb = fit_codebook(train_feats, K=K, seed=budget.seed, max_iters=budget.codebook_iters,
                          training_tag=f"sweep K={K}")
        qmse = quantization_mse(train_feats, cb)
        for sv in _svcomp_settings(with_svcomp):
            cfg = budget.train_config(svcomp_enabled=sv)
            ckpt = _train_cell(corpus, cb, cfg, budget.encoder)
            row = {"K": K, "svcomp": sv}
            row.update(evaluate_checkpoint(ckpt, cb, corpus, budget.encoder))
            row["quant_mse"] = qmse
            log.info("sweep cell %s", row)
            rows.append(row)
    return rows


ABLATIONS = (
    ("full", {}, None),
    ("-bottleneck", {"bottleneck": False}, None),
    ("-pseudo-encoder-variant", {}, "pseudo-nodelta"),
    ("-external-speaker-embedding", {"svcomp_enabled": False, "external_speaker": True}, None),
)


def run_ablations(dataset, budget: Budget = Budget(), K: int = 256) -> list[dict]:
    """One row per model variant, all trained with the same budget and K."""
    corpus = dataset if isinstance(dataset, _Corpus) else _Corpus(dataset, budget)
    seed = make_encoder(budget.encoder).seed
    rows = []
    codebooks = {}
    for name, overrides, enc_kind in ABLATIONS:
        spec = budget.encoder if enc_kind is None else f"{enc_kind}({seed})"
        if spec not in codebooks:
            feats = [u.features for u in corpus.encoded(spec, "train")]
            codebooks[spec] = fit_codebook(feats, K=K, seed=budget.seed, max_iters=budget.codebook_iters,
                                           training_tag=f"ablation {spec}")
        cb = codebooks[spec]
        cfg = budget.train_config(encoder=spec, **overrides)
        ckpt = _train_cell(corpus, cb, cfg, spec)
        row = {"config": name}
        row.update(evaluate_checkpoint(ckpt, cb, corpus, spec))
        log.info("ablation row %s", row)
        rows.append(row)
    return rows


def write_table(rows, path=None) -> str:
    """Comma-separated table with a header row; also written to ``path`` if given."""
    if not rows:
        raise InvalidConfig("no rows to write")
    fields = list(rows[0])
    lines = [",".join(fields)]
    for r in rows:
        lines.append(",".join(_fmt(r[f]) for f in fields))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def plot_points(rows, metric: str = "recon_mel_l1") -> list[tuple]:
    """``(K, value, svcomp)`` triples for plotting one metric against codebook size."""
    return [(r["K"], r[metric], r["svcomp"]) for r in rows]


def degradation(rows, metric: str = "recon_mel_l1") -> dict:
    """Metric at the smallest K minus metric at the largest K, per svcomp setting."""
    out = {}
    for sv in sorted({r["svcomp"] for r in rows}, reverse=True):
        cells = sorted((r["K"], r[metric]) for r in rows if r["svcomp"] == sv)
        out[sv] = cells[0][1] - cells[-1][1]
    return out

