from fractions import Fraction

import numpy as np
import pytest
import torch

from skqvc.codebook import Codebook, QuantizedSequence, ResidualSequence, quantize, residual
from skqvc.disentangler import (
    ContentEmbedding,
    DisentanglerParams,
    SpeakerEmbedding,
    VariationEmbedding,
    build_content,
    disentangle,
    recombine,
    speaker_embedding,
    svcomp,
)
from skqvc.errors import DimMismatch, EmptySequence, InvalidConfig, LengthMismatch, ShapeMismatch
from skqvc.features import FeatureSequence


def random_case(rng, dim=16, K=8, T=10):
    C = rng.standard_normal((K, dim)).astype(np.float32)
    W = FeatureSequence(rng.standard_normal((dim, T)))
    return W, Codebook(C, frozen=True)


def selector_params(dim=16, d_v=4):
    p = DisentanglerParams(dim, d_v)
    with torch.no_grad():
        p.svcomp_proj.weight.zero_()
        p.svcomp_proj.bias.zero_()
        p.content_proj.weight.zero_()
        p.content_proj.bias.zero_()
        for i in range(d_v):
            p.svcomp_proj.weight[i, i, 0] = 1.0
        for i in range(dim - d_v):
            p.content_proj.weight[i, i, 0] = 1.0
    return p


# ---------------------------------------------------------------------------
# speaker embedding


def test_speaker_embedding_constant_columns():
    c = np.float32(np.random.default_rng(0).standard_normal(12)).astype(np.float64)
    S = ResidualSequence(np.repeat(c[:, None], 37, axis=1))
    assert np.array_equal(speaker_embedding(S).values, c)


def test_speaker_embedding_matches_exact_rational_mean():
    rng = np.random.default_rng(1)
    S = rng.standard_normal((6, 101)) * 10.0 ** rng.uniform(-3, 3, (6, 101))
    got = speaker_embedding(ResidualSequence(S)).values
    for d in range(6):
        exact = sum(Fraction(float(v)) for v in S[d]) / 101
        assert abs(Fraction(float(got[d])) - exact) <= abs(exact) * Fraction(2, 2 ** 52) + Fraction(1, 10 ** 300)


def test_speaker_embedding_permutation_invariant_exact():
    rng = np.random.default_rng(2)
    for _ in range(50):
        S = rng.standard_normal((32, int(rng.integers(1, 60)))) * 1e3
        perm = rng.permutation(S.shape[1])
        a = speaker_embedding(ResidualSequence(S)).values
        b = speaker_embedding(ResidualSequence(S[:, perm])).values
        assert a.tobytes() == b.tobytes()


def test_speaker_embedding_empty():
    with pytest.raises(EmptySequence):
        speaker_embedding(ResidualSequence(np.zeros((4, 0))))


# ---------------------------------------------------------------------------
# svcomp / build_content


def test_svcomp_constant_residual_gives_bias():
    p = DisentanglerParams(16, 4, seed=3)
    c = np.float32(np.random.default_rng(3).standard_normal(16)).astype(np.float64)
    S = ResidualSequence(np.repeat(c[:, None], 9, axis=1))
    V = svcomp(S, speaker_embedding(S), p)
    assert V.values.shape == (4, 9)
    for t in range(9):
        assert torch.equal(V.values[:, t], p.svcomp_proj.bias.detach())


def test_svcomp_selector_passes_leading_rows():
    rng = np.random.default_rng(4)
    p = selector_params(16, 4)
    S = ResidualSequence(rng.standard_normal((16, 11)))
    s_avg = speaker_embedding(S)
    V = svcomp(S, s_avg, p).values.detach().numpy()
    expected = (S.values - s_avg.values[:, None])[:4].astype(np.float32)
    assert np.array_equal(V, expected)


def test_build_content_truncation_selector():
    rng = np.random.default_rng(5)
    p = selector_params(16, 4)
    Qv = rng.standard_normal((16, 7)).astype(np.float32)
    Q = QuantizedSequence(Qv, np.zeros(7, dtype=np.int64))
    C = build_content(Q, VariationEmbedding(torch.zeros(4, 7)), p)
    assert C.values.shape == (16, 7) and C.d_c == 12
    assert np.array_equal(C.values[:12].detach().numpy(), Qv[:12])
    assert torch.all(C.values[12:] == 0)


def test_default_dimensions():
    rng = np.random.default_rng(6)
    p = DisentanglerParams()
    assert (p.dim, p.d_v, p.d_c) == (1024, 8, 1016)
    W = FeatureSequence(rng.standard_normal((1024, 5)))
    cb = Codebook(rng.standard_normal((4, 1024)), frozen=True)
    ds = disentangle(W, cb, p)
    assert tuple(ds.C.values.shape) == (1024, 5)
    assert tuple(ds.V.values.shape) == (8, 5)


def test_permutation_equivariance_exact():
    rng = np.random.default_rng(7)
    p = DisentanglerParams(32, 8, seed=1)
    W, cb = random_case(rng, dim=32, T=25)
    perm = rng.permutation(25)
    a = disentangle(W, cb, p)
    b = disentangle(FeatureSequence(W.values[:, perm]), cb, p)
    assert a.s_avg.values.tobytes() == b.s_avg.values.tobytes()
    assert torch.equal(a.V.values[:, perm], b.V.values)
    assert torch.equal(a.C.values[:, perm], b.C.values)


def test_errors():
    p = DisentanglerParams(16, 4)
    Q = QuantizedSequence(np.zeros((16, 5), dtype=np.float32), np.zeros(5, dtype=np.int64))
    with pytest.raises(LengthMismatch):
        build_content(Q, VariationEmbedding(torch.zeros(4, 6)), p)
    with pytest.raises(ShapeMismatch):
        build_content(Q, VariationEmbedding(torch.zeros(3, 5)), p)
    with pytest.raises(ShapeMismatch):
        svcomp(ResidualSequence(np.zeros((16, 3))), SpeakerEmbedding(np.zeros(8)), p)
    with pytest.raises(DimMismatch):
        recombine(ContentEmbedding(torch.zeros(16, 3), 12), SpeakerEmbedding(np.zeros(8)))
    with pytest.raises(DimMismatch):
        disentangle(FeatureSequence(np.zeros((8, 3))), Codebook(np.zeros((2, 16))), p)
    with pytest.raises(InvalidConfig):
        DisentanglerParams(16, 16)
    with pytest.raises(InvalidConfig):
        DisentanglerParams(16, 4, mode="other")


def test_params_seeded():
    a = DisentanglerParams(16, 4, seed=0)
    b = DisentanglerParams(16, 4, seed=0)
    c = DisentanglerParams(16, 4, seed=1)
    assert torch.equal(a.content_proj.weight, b.content_proj.weight)
    assert not torch.equal(a.content_proj.weight, c.content_proj.weight)


# ---------------------------------------------------------------------------
# recombine


def test_recombine_broadcasts_speaker():
    rng = np.random.default_rng(8)
    C = ContentEmbedding(torch.from_numpy(rng.standard_normal((6, 4)).astype(np.float32)), 4)
    s = SpeakerEmbedding(rng.standard_normal(6))
    z = recombine(C, s)
    expected = C.values + torch.from_numpy(s.values).float()[:, None]
    assert torch.equal(z, expected)
    zero = recombine(C, SpeakerEmbedding(np.zeros(6)))
    assert torch.equal(zero, C.values)


def test_recombine_difference_is_constant_column():
    rng = np.random.default_rng(9)
    C = ContentEmbedding(torch.from_numpy(rng.standard_normal((6, 20))), 4)
    a = SpeakerEmbedding(rng.standard_normal(6))
    b = SpeakerEmbedding(rng.standard_normal(6))
    diff = (recombine(C, a) - recombine(C, b)).numpy()
    np.testing.assert_allclose(diff, np.repeat((a.values - b.values)[:, None], 20, axis=1), atol=1e-12)


# ---------------------------------------------------------------------------
# composition


def test_disentangle_matches_manual_composition():
    rng = np.random.default_rng(10)
    p = DisentanglerParams(16, 4, seed=2)
    W, cb = random_case(rng)
    ds = disentangle(W, cb, p)
    Q = quantize(W, cb)
    S = residual(W, Q)
    s_avg = speaker_embedding(S)
    V = svcomp(S, s_avg, p)
    C = build_content(Q, V, p)
    assert np.array_equal(ds.indices, Q.indices)
    assert ds.s_avg.values.tobytes() == s_avg.values.tobytes()
    assert torch.equal(ds.V.values, V.values)
    assert torch.equal(ds.C.values, C.values)


def test_all_centroid_input():
    rng = np.random.default_rng(11)
    p = DisentanglerParams(16, 4, seed=2)
    cb = Codebook(rng.standard_normal((8, 16)), frozen=True)
    W = FeatureSequence(cb.centroids[[1, 5, 5, 0]].T)
    ds = disentangle(W, cb, p)
    assert np.all(ds.S.values == 0) and np.all(ds.s_avg.values == 0)
    for t in range(4):
        assert torch.equal(ds.V.values[:, t], p.svcomp_proj.bias.detach())


def test_variation_modes():
    rng = np.random.default_rng(12)
    W, cb = random_case(rng)
    Q = quantize(W, cb)
    S = residual(W, Q)
    s_avg = speaker_embedding(S).values
    res = disentangle(W, cb, DisentanglerParams(16, 4, mode="residual"))
    expected = torch.from_numpy(Q.vectors) + torch.from_numpy(S.values - s_avg[:, None]).float()
    assert res.V is None and torch.equal(res.C.values, expected)
    none = disentangle(W, cb, DisentanglerParams(16, 4, mode="none"))
    assert none.V is None and torch.equal(none.C.values, torch.from_numpy(Q.vectors))


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    rng = np.random.default_rng(13)
    p = DisentanglerParams(8, 2, seed=4).double()
    W, cb = random_case(rng, dim=8, K=5, T=4)
    Q = quantize(W, cb)
    S = residual(W, Q)
    s_avg = speaker_embedding(S)
    R = torch.from_numpy(rng.standard_normal((8, 4)))

    def loss():
        z = recombine(build_content(Q, svcomp(S, s_avg, p), p), s_avg)
        return (torch.tanh(z) * R).sum()

    params = [p.content_proj.weight, p.content_proj.bias, p.svcomp_proj.weight, p.svcomp_proj.bias]
    p.zero_grad()
    loss().backward()
    eps = 1e-6
    for prm in params:
        analytic = prm.grad.clone()
        flat = prm.data.view(-1)
        numeric = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = loss().item()
            flat[i] = orig - eps
            down = loss().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * eps)
        rel = (analytic.view(-1) - numeric).norm() / max(numeric.norm(), 1e-12)
        assert rel < 1e-4
