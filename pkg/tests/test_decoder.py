import numpy as np
import pytest
import torch
from torch import nn

from skqvc.codebook import Codebook, quantize, residual
from skqvc.decoder import (
    GENERATOR_LOSS_TERMS,
    DiscriminatorConfig,
    Discriminators,
    Generator,
    GeneratorConfig,
    LossWeights,
    compose_generator_loss,
    discriminator_loss,
    discriminator_objective,
    generate,
    generator_loss,
    generator_objective,
    match_length,
    mel_l1,
)
from skqvc.disentangler import DisentanglerParams, build_content, recombine, speaker_embedding, svcomp
from skqvc.errors import DimMismatch, InvalidConfig, LengthMismatch
from skqvc.features import FeatureSequence, Waveform, compute_mel

TINY_G = GeneratorConfig(in_dim=16, base_channels=16, resblock_kernels=(3,), resblock_dilations=((1, 3),))
TINY_D = DiscriminatorConfig(scale=1 / 64)


def tiny_generator(seed=0, in_dim=16):
    torch.manual_seed(seed)
    return Generator(GeneratorConfig(in_dim=in_dim, base_channels=16, resblock_kernels=(3,),
                                     resblock_dilations=((1, 3),)))


def tiny_discriminators(seed=0):
    torch.manual_seed(seed)
    return Discriminators(TINY_D)


def audio_pair(rng, n=1600):
    return (torch.from_numpy(rng.uniform(-0.9, 0.9, (1, 1, n))).float(),
            torch.from_numpy(rng.uniform(-0.9, 0.9, (1, 1, n))).float())


# ---------------------------------------------------------------------------
# generator


def test_generate_length_50_frames():
    g = tiny_generator(in_dim=1024)
    z = torch.randn(1024, 50)
    w = generate(z, g)
    assert isinstance(w, Waveform) and w.length == 16000
    assert np.all(np.abs(w.samples) <= 1.0)


def test_length_contract_all_T():
    g = tiny_generator()
    with torch.no_grad():
        for T in range(1, 201):
            assert g(torch.randn(1, 16, T)).shape[-1] == T * 320


def test_generate_deterministic_and_doubling():
    g = tiny_generator()
    z = torch.randn(16, 13)
    a = generate(z, g)
    b = generate(z, g)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert generate(torch.cat([z, z], dim=1), g).length == 2 * a.length


def test_generate_dim_mismatch():
    g = tiny_generator()
    with pytest.raises(DimMismatch):
        generate(torch.zeros(8, 5), g)
    with pytest.raises(DimMismatch):
        generate(torch.zeros(16), g)


def test_generator_config_validation():
    with pytest.raises(InvalidConfig):
        Generator(GeneratorConfig(upsample_rates=(8, 5, 4, 3)))
    with pytest.raises(InvalidConfig):
        Generator(GeneratorConfig(upsample_kernels=(16, 11, 8)))
    with pytest.raises(InvalidConfig):
        Generator(GeneratorConfig(upsample_kernels=(15, 11, 8, 4)))


def test_discriminator_layout():
    d = Discriminators()
    assert [p.period for p in d.period_discriminators] == [2, 3, 5, 7, 11]
    assert len(d.scale_discriminators) == 3
    outs = tiny_discriminators()(torch.randn(2, 1, 3200))
    assert len(outs) == 8
    for score, fmaps in outs:
        assert score.shape[0] == 2 and len(fmaps) >= 2


# ---------------------------------------------------------------------------
# losses


def test_identity_input_zero_mel_and_fm():
    rng = np.random.default_rng(0)
    real, _ = audio_pair(rng)
    d = tiny_discriminators()
    parts = generator_loss(real, real.clone(), d)
    assert parts.l_mel == 0.0 and parts.l_fm == 0.0
    assert parts.l_g_total == parts.l_adv_g


def test_zero_lambdas_total_is_adversarial():
    rng = np.random.default_rng(1)
    real, fake = audio_pair(rng)
    parts = generator_loss(real, fake, tiny_discriminators(), LossWeights(0.0, 0.0))
    assert parts.l_g_total == parts.l_adv_g
    assert parts.l_mel > 0 and parts.l_fm > 0


def test_default_composition_exact():
    rng = np.random.default_rng(2)
    real, fake = audio_pair(rng, 3200)
    parts = generator_loss(real, fake, tiny_discriminators())
    assert parts.l_g_total == parts.l_adv_g + 2 * parts.l_fm + 45 * parts.l_mel
    assert LossWeights() == LossWeights(2.0, 45.0)
    assert len(GENERATOR_LOSS_TERMS) == 3


def test_composition_exact_random_lambdas():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        adv, fm, mel = (torch.tensor(v, dtype=torch.float32) for v in rng.uniform(0, 50, 3))
        lf, lm = (float(v) for v in rng.uniform(0, 100, 2))
        total = float(compose_generator_loss(adv, fm, mel, lf, lm))
        assert total == float(adv) + lf * float(fm) + lm * float(mel)
    real, fake = audio_pair(rng)
    d = tiny_discriminators()
    for _ in range(5):
        lf, lm = (float(v) for v in rng.uniform(0, 100, 2))
        _, parts = generator_objective(real, fake, d, lf, lm)
        assert parts.l_g_total == parts.l_adv_g + lf * parts.l_fm + lm * parts.l_mel


def test_l_mel_matches_independent_computation():
    rng = np.random.default_rng(4)
    a = rng.uniform(-1, 1, 1600).astype(np.float32)
    b = rng.uniform(-1, 1, 1600).astype(np.float32)
    expected = np.mean(np.abs(compute_mel(Waveform(a)).bins.astype(np.float64)
                              - compute_mel(Waveform(b)).bins.astype(np.float64)))
    got = float(mel_l1(torch.from_numpy(a), torch.from_numpy(b)))
    assert abs(got - expected) <= 1e-6 * expected
    parts = generator_loss(Waveform(a), Waveform(b), tiny_discriminators())
    assert abs(parts.l_mel - expected) <= 1e-6 * expected


def test_l_mel_positive_on_distinct_pairs():
    rng = np.random.default_rng(5)
    for _ in range(10):
        a, b = audio_pair(rng, 960)
        assert float(mel_l1(a, a)) == 0.0
        assert float(mel_l1(a, b)) > 1e-8


def test_length_matching():
    real = torch.zeros(1, 1, 3200)
    assert match_length(real, torch.ones(1, 1, 3300)).shape[-1] == 3200
    padded = match_length(real, torch.ones(1, 1, 3000))
    assert padded.shape[-1] == 3200 and torch.all(padded[..., 3000:] == 0)
    with pytest.raises(LengthMismatch):
        match_length(real, torch.ones(1, 1, 3521))
    with pytest.raises(LengthMismatch):
        generator_loss(real, torch.ones(1, 1, 2000), tiny_discriminators())
    with pytest.raises(LengthMismatch):
        discriminator_loss(real, torch.ones(1, 1, 2000), tiny_discriminators())


class _OracleDiscriminator(nn.Module):
    """Scores 1 on positive-mean audio, 0 otherwise."""

    def forward(self, x):
        v = (x.mean(dim=(1, 2)) > 0).float()[:, None].expand(-1, 7)
        return [(v, [x]) for _ in range(3)]


def test_discriminator_loss_zero_at_optimum_and_nonnegative():
    real = torch.full((1, 1, 640), 0.5)
    fake = torch.full((1, 1, 640), -0.5)
    assert discriminator_loss(real, fake, _OracleDiscriminator()) == 0.0
    rng = np.random.default_rng(6)
    d = tiny_discriminators()
    for _ in range(5):
        a, b = audio_pair(rng, 640)
        assert discriminator_loss(a, b, d) >= 0.0


def test_discriminator_loss_does_not_reach_generator():
    g = tiny_generator()
    d = tiny_discriminators()
    fake = g(torch.randn(1, 16, 4))
    real = torch.zeros_like(fake)
    discriminator_objective(real, fake, d).backward()
    assert all(p.grad is None for p in g.parameters())


def test_discriminator_gradient_finite_differences():
    rng = np.random.default_rng(7)
    d = tiny_discriminators().double().eval()
    real = torch.from_numpy(rng.uniform(-1, 1, (1, 1, 960)))
    fake = torch.from_numpy(rng.uniform(-1, 1, (1, 1, 960)))
    targets = [
        d.period_discriminators[0].convs[1].parametrizations.weight.original1,
        d.scale_discriminators[1].convs[0].parametrizations.weight.original0,
        d.scale_discriminators[0].conv_post.bias,
    ]
    d.zero_grad()
    discriminator_objective(real, fake, d).backward()
    eps = 1e-6
    for prm in targets:
        flat = prm.data.view(-1)
        analytic = prm.grad.view(-1)
        for i in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = discriminator_objective(real, fake, d).item()
            flat[i] = orig - eps
            down = discriminator_objective(real, fake, d).item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            assert abs(analytic[i].item() - numeric) <= 1e-3 * max(abs(numeric), 1e-8)


def test_mel_loss_gradient_finite_differences():
    rng = np.random.default_rng(8)
    real = torch.from_numpy(rng.uniform(-1, 1, 1280))
    fake = torch.from_numpy(rng.uniform(-1, 1, 1280)).requires_grad_(True)
    mel_l1(real, fake).backward()
    analytic = fake.grad.clone()
    eps = 1e-6
    x = fake.detach().clone()
    idx = rng.choice(1280, size=40, replace=False)
    numeric = torch.zeros(40, dtype=torch.float64)
    for j, i in enumerate(idx):
        x[i] += eps
        up = float(mel_l1(real, x))
        x[i] -= 2 * eps
        down = float(mel_l1(real, x))
        x[i] += eps
        numeric[j] = (up - down) / (2 * eps)
    rel = (analytic[idx] - numeric).norm() / numeric.norm()
    assert rel < 1e-4


def test_gradient_flow_every_parameter():
    rng = np.random.default_rng(9)
    dim = 16
    p = DisentanglerParams(dim, 4, seed=0)
    g = tiny_generator(in_dim=dim)
    d = tiny_discriminators()
    cb = Codebook(rng.standard_normal((6, dim)), frozen=True)
    W = FeatureSequence(rng.standard_normal((dim, 10)))
    Q = quantize(W, cb)
    S = residual(W, Q)
    s_avg = speaker_embedding(S)
    z = recombine(build_content(Q, svcomp(S, s_avg, p), p), s_avg)
    real = torch.from_numpy(rng.uniform(-0.5, 0.5, (1, 1, 3200))).float()
    fake = g(z.unsqueeze(0))
    total, _ = generator_objective(real, fake, d)
    total.backward()
    for name, prm in list(p.named_parameters()) + list(g.named_parameters()):
        assert prm.grad is not None and torch.any(prm.grad != 0), name
    # the codebook is plain numpy: nothing to differentiate, and it is read-only
    assert not cb.centroids.flags.writeable
