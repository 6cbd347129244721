"""K-means codebook: fitting, nearest-centroid quantization and SKQC files."""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    ShapeMismatch,
    TooFewFrames,
    UnreadableFile,
    UnsupportedFormat,
)
from .features import FeatureSequence

log = logging.getLogger(__name__)

SKQC_MAGIC = b"SKQC"
SKQC_HEADER = struct.Struct("<4sHIIQ")


@dataclass
class Codebook:
    centroids: np.ndarray
    frozen: bool = False
    fit_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float32)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ShapeMismatch(f"centroids must be (K, dim), got {self.centroids.shape}")
        if self.frozen:
            self.freeze()

    @property
    def K(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    @property
    def seed(self) -> int:
        return int(self.fit_meta.get("seed", 0))

    def freeze(self):
        self.centroids = np.array(self.centroids, dtype=np.float32, copy=True)
        self.centroids.setflags(write=False)
        self.frozen = True
        return self

    def to_bytes(self) -> bytes:
        header = SKQC_HEADER.pack(SKQC_MAGIC, 1, self.K, self.dim, self.seed)
        return header + np.ascontiguousarray(self.centroids, dtype="<f4").tobytes()

    def checksum(self) -> str:
        """SHA-256 of the SKQC serialization; equals the hash of the saved file."""
        return hashlib.sha256(self.to_bytes()).hexdigest()


@dataclass
class QuantizedSequence:
    vectors: np.ndarray  # (dim, T) float32, each column a centroid
    indices: np.ndarray  # (T,) int64


@dataclass
class ResidualSequence:
    # float64: the difference of two float32 operands is exact here, so
    # Q + S reproduces W bit for bit.
    values: np.ndarray

    @property
    def T(self) -> int:
        return int(self.values.shape[1])


# ---------------------------------------------------------------------------
# persistence


def save_codebook(path, cb: Codebook):
    Path(path).write_bytes(cb.to_bytes())


def load_codebook(path) -> Codebook:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    if len(raw) < SKQC_HEADER.size or raw[:4] != SKQC_MAGIC:
        raise BadMagic(f"{path}: not an SKQC file")
    _, version, k, dim, seed = SKQC_HEADER.unpack_from(raw)
    if version != 1:
        raise UnsupportedFormat(f"{path}: SKQC version {version}")
    payload = raw[SKQC_HEADER.size:]
    if len(payload) != k * dim * 4:
        raise DimMismatch(f"{path}: header declares {k}x{dim} but payload holds {len(payload)} bytes")
    centroids = np.frombuffer(payload, dtype="<f4").reshape(k, dim).astype(np.float32)
    return Codebook(centroids, frozen=True, fit_meta={"seed": seed, "training_tag": str(path)})


# ---------------------------------------------------------------------------
# fitting


def _sq_dists(X, C, c_sq=None):
    """Squared distances via the expanded form; fine for fitting, not for ties."""
    if c_sq is None:
        c_sq = np.einsum("kd,kd->k", C, C)
    x_sq = np.einsum("nd,nd->n", X, X)
    d = x_sq[:, None] - 2.0 * (X @ C.T) + c_sq[None, :]
    return np.maximum(d, 0.0)


def _cluster_sums(labels, X, k):
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    starts = np.flatnonzero(np.r_[True, sorted_labels[1:] != sorted_labels[:-1]])
    sums = np.zeros((k, X.shape[1]))
    sums[sorted_labels[starts]] = np.add.reduceat(X[order], starts, axis=0)
    return sums


def _kmeanspp(X, k, rng, init=None):
    """k-means++ seeding, optionally continuing from existing centres."""
    n = X.shape[0]
    centers = [] if init is None else [np.asarray(c, dtype=np.float64) for c in init]
    if not centers:
        centers.append(X[rng.integers(n)])
    d2 = _sq_dists(X, np.stack(centers)).min(axis=1)
    while len(centers) < k:
        total = d2.sum()
        if total <= 0:
            raise TooFewFrames(f"fewer than K={k} distinct frames in the training stream")
        idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx][None, :])[:, 0])
    return np.stack(centers).astype(np.float64)


def _reseed(C, empty, points, point_d2):
    """Move each empty centre onto a not-yet-used far point of ``points``."""
    order = np.argsort(-point_d2, kind="stable")
    chosen = []
    pos = 0
    for k in np.flatnonzero(empty):
        while pos < len(order):
            j = order[pos]
            pos += 1
            if point_d2[j] <= 0 or any(np.array_equal(points[j], c) for c in chosen):
                continue
            chosen.append(points[j])
            C[k] = points[j]
            break
        else:
            return False
    return True


def _distinct_rows(C) -> bool:
    return np.unique(C.astype(np.float32), axis=0).shape[0] == C.shape[0]


def fit_codebook(
    features: Iterable[FeatureSequence],
    K: int = 256,
    batch_size: int = 1024,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-4,
    training_tag: str = "",
    init: np.ndarray | None = None,
) -> Codebook:
    """Minibatch K-means over every frame of ``features``.

    Parameters
    ----------
    features : iterable of FeatureSequence
        Training stream; all sequences must share one feature dim.
    K : int
        Number of centroids.
    batch_size : int
        Frames per minibatch. When the whole stream fits in one batch the
        fit falls back to full-batch Lloyd iterations.
    seed : int
        Seeds initialization and batch order; same stream + seed gives
        bitwise-identical centroids.
    max_iters : int
        Maximum passes over the stream. Stops early once no centroid moves
        by more than ``tol`` (L2) in a pass.
    init : array, optional
        Warm-start centroids (fewer than or equal to ``K`` rows); the rest
        are seeded by k-means++.
    """
    mats = []
    dim = None
    for fs in features:
        if dim is None:
            dim = fs.dim
        elif fs.dim != dim:
            raise DimMismatch(f"feature dim {fs.dim} differs from {dim} earlier in the stream")
        mats.append(fs.values.T.astype(np.float64))
    if not mats:
        raise TooFewFrames("empty feature stream")
    X = np.concatenate(mats, axis=0)
    n = X.shape[0]
    if n < K:
        raise TooFewFrames(f"{n} frames < K={K}")
    if init is not None and (np.ndim(init) != 2 or np.shape(init)[1] != dim or len(init) > K):
        raise DimMismatch("init must be (<=K, dim)")

    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, K, rng, init)
    n_batches = 0
    epochs = 0

    if n <= batch_size:
        for epochs in range(1, max_iters + 1):
            d = _sq_dists(X, C)
            labels = d.argmin(axis=1)
            counts = np.bincount(labels, minlength=K)
            sums = _cluster_sums(labels, X, K)
            new = C.copy()
            nz = counts > 0
            new[nz] = sums[nz] / counts[nz, None]
            if not nz.all():
                _reseed(new, ~nz, X, d[np.arange(n), labels])
            n_batches += 1
            shift = np.sqrt(((new - C) ** 2).sum(axis=1).max())
            C = new
            if shift < tol:
                break
    else:
        counts = np.zeros(K)
        for epochs in range(1, max_iters + 1):
            before = C.copy()
            hit = np.zeros(K, dtype=bool)
            perm = rng.permutation(n)
            for start in range(0, n, batch_size):
                B = X[perm[start:start + batch_size]]
                d = _sq_dists(B, C)
                labels = d.argmin(axis=1)
                n_k = np.bincount(labels, minlength=K)
                sums = _cluster_sums(labels, B, K)
                nz = n_k > 0
                counts[nz] += n_k[nz]
                # running mean per centre: equivalent to per-sample 1/count steps
                C[nz] += (sums[nz] - n_k[nz, None] * C[nz]) / counts[nz, None]
                hit |= nz
                n_batches += 1
            if not hit.all():
                last_d2 = d[np.arange(len(B)), labels]
                _reseed(C, ~hit, B, last_d2)
                counts[~hit] = 0
            shift = np.sqrt(((C - before) ** 2).sum(axis=1).max())
            if shift < tol:
                break

    if not _distinct_rows(C):
        # collapse after convergence: push duplicates onto the worst-fit frames
        d = _sq_dists(X, C)
        labels = d.argmin(axis=1)
        _, first = np.unique(C.astype(np.float32), axis=0, return_index=True)
        dup = np.ones(K, dtype=bool)
        dup[first] = False
        if not _reseed(C, dup, X, d[np.arange(n), labels]) or not _distinct_rows(C):
            raise TooFewFrames(f"cannot place K={K} distinct centroids on this stream")

    log.info("fit_codebook: K=%d dim=%d frames=%d epochs=%d batches=%d", K, dim, n, epochs, n_batches)
    meta = {
        "seed": int(seed),
        "batch_size": int(batch_size),
        "n_batches": int(n_batches),
        "epochs": int(epochs),
        "max_iters": int(max_iters),
        "frames": int(n),
        "training_tag": training_tag,
    }
    return Codebook(C.astype(np.float32), frozen=True, fit_meta=meta)


# ---------------------------------------------------------------------------
# quantization


def _check_dim(W: FeatureSequence, cb: Codebook):
    if W.dim != cb.dim:
        raise DimMismatch(f"feature dim {W.dim} != codebook dim {cb.dim}")


def nearest_indices(frames: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact argmin of squared L2 distance per row of ``frames``; ties go to the lowest index.

    A BLAS pass finds candidates; anything within a safety margin of the
    best is re-scored with direct differences so the result matches an
    exhaustive search exactly.
    """
    X = np.asarray(frames, dtype=np.float64)
    C = np.asarray(centroids, dtype=np.float64)
    c_sq = np.einsum("kd,kd->k", C, C)
    out = np.empty(X.shape[0], dtype=np.int64)
    chunk = max(1, 2_000_000 // max(1, C.shape[0]))
    for s in range(0, X.shape[0], chunk):
        xb = X[s:s + chunk]
        approx = _sq_dists(xb, C, c_sq)
        best = approx.min(axis=1)
        x_sq = np.einsum("nd,nd->n", xb, xb)
        margin = 1e-9 * (x_sq + c_sq.max()) + 1e-300
        for i in range(xb.shape[0]):
            cand = np.flatnonzero(approx[i] <= best[i] + margin[i])
            if cand.size == 1:
                out[s + i] = cand[0]
                continue
            exact = ((C[cand] - xb[i]) ** 2).sum(axis=1)
            out[s + i] = cand[np.argmin(exact)]
    return out


def quantize(W: FeatureSequence, cb: Codebook) -> QuantizedSequence:
    _check_dim(W, cb)
    idx = nearest_indices(W.values.T, cb.centroids)
    return QuantizedSequence(np.ascontiguousarray(cb.centroids[idx].T), idx)


def residual(W: FeatureSequence, Q: QuantizedSequence) -> ResidualSequence:
    if W.values.shape != Q.vectors.shape:
        raise ShapeMismatch(f"W {W.values.shape} vs Q {Q.vectors.shape}")
    return ResidualSequence(W.values.astype(np.float64) - Q.vectors.astype(np.float64))


def quantization_mse(features: Iterable[FeatureSequence], cb: Codebook) -> float:
    """Mean per-frame squared quantization error over all frames."""
    total, count = 0.0, 0
    for fs in features:
        q = quantize(fs, cb)
        total += float(((fs.values.astype(np.float64) - q.vectors) ** 2).sum())
        count += fs.T
    return total / count
