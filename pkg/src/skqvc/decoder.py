"""HiFi-GAN style generator, multi-period / multi-scale discriminators and losses.

Channel widths are configurable so the same architecture runs at desk
scale; the upsampling schedule always multiplies to the 320-sample hop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm, weight_norm

from .errors import DimMismatch, InvalidConfig, LengthMismatch
from .features import HOP, StftConfig, Waveform, log_mel

LRELU_SLOPE = 0.1


@dataclass(frozen=True)
class GeneratorConfig:
    in_dim: int = 1024
    base_channels: int = 128
    upsample_rates: tuple = (8, 5, 4, 2)
    upsample_kernels: tuple = (16, 11, 8, 4)
    resblock_kernels: tuple = (3, 7, 11)
    resblock_dilations: tuple = ((1, 3, 5), (1, 3, 5), (1, 3, 5))

    def validate(self):
        if math.prod(self.upsample_rates) != HOP:
            raise InvalidConfig(f"upsample rates {self.upsample_rates} must multiply to {HOP}")
        if len(self.upsample_rates) != len(self.upsample_kernels):
            raise InvalidConfig("one kernel size per upsample rate")
        if len(self.resblock_kernels) != len(self.resblock_dilations):
            raise InvalidConfig("one dilation tuple per resblock kernel")
        for u, k in zip(self.upsample_rates, self.upsample_kernels):
            if (k - u) % 2:
                raise InvalidConfig(f"kernel {k} - rate {u} must be even for exact upsampling")
        if self.base_channels >> len(self.upsample_rates) < 1:
            raise InvalidConfig("base_channels too small for the number of upsample stages")
        return self


@dataclass(frozen=True)
class DiscriminatorConfig:
    periods: tuple = (2, 3, 5, 7, 11)
    n_scales: int = 3
    mpd_channels: tuple = (32, 128, 512, 1024, 1024)
    msd_channels: tuple = (128, 128, 256, 512, 1024, 1024, 1024)
    msd_groups: tuple = (1, 4, 16, 16, 16, 16, 1)
    scale: float = 0.25
    spectral_norm_first_scale: bool = True

    def channels(self, base):
        return tuple(max(1, int(round(c * self.scale))) for c in base)


@dataclass
class LossBreakdown:
    l_adv_g: float
    l_adv_d: float
    l_fm: float
    l_mel: float
    l_g_total: float

    def as_dict(self):
        return {
            "l_adv_g": self.l_adv_g,
            "l_fm": self.l_fm,
            "l_mel": self.l_mel,
            "l_adv_d": self.l_adv_d,
            "l_g_total": self.l_g_total,
        }


# The generator objective is exactly these three weighted terms.
GENERATOR_LOSS_TERMS = ("l_adv_g", "l_fm", "l_mel")


def _pad(k, d=1):
    return (k * d - d) // 2


def _wn(conv):
    # HiFi-GAN draws generator conv weights from N(0, 0.01) before weight norm.
    with torch.no_grad():
        conv.weight.normal_(0.0, 0.01)
    return weight_norm(conv)


class ResBlock(nn.Module):
    def __init__(self, channels, kernel_size, dilations):
        super().__init__()
        self.convs1 = nn.ModuleList(
            _wn(nn.Conv1d(channels, channels, kernel_size, 1, dilation=d, padding=_pad(kernel_size, d)))
            for d in dilations
        )
        self.convs2 = nn.ModuleList(
            _wn(nn.Conv1d(channels, channels, kernel_size, 1, padding=_pad(kernel_size)))
            for _ in dilations
        )

    def forward(self, x):
        for c1, c2 in zip(self.convs1, self.convs2):
            xt = c2(F.leaky_relu(c1(F.leaky_relu(x, LRELU_SLOPE)), LRELU_SLOPE))
            x = x + xt
        return x


class Generator(nn.Module):
    """Maps a ``(B, in_dim, T)`` embedding to ``(B, 1, T * 320)`` audio."""

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.base_channels
        self.conv_pre = weight_norm(nn.Conv1d(cfg.in_dim, ch, 7, 1, padding=3))
        self.ups = nn.ModuleList()
        self.resblocks = nn.ModuleList()
        for u, k in zip(cfg.upsample_rates, cfg.upsample_kernels):
            self.ups.append(_wn(nn.ConvTranspose1d(ch, ch // 2, k, u, padding=(k - u) // 2)))
            ch //= 2
            for rk, rd in zip(cfg.resblock_kernels, cfg.resblock_dilations):
                self.resblocks.append(ResBlock(ch, rk, rd))
        self.conv_post = _wn(nn.Conv1d(ch, 1, 7, 1, padding=3))

    def forward(self, x):
        n_kernels = len(self.cfg.resblock_kernels)
        x = self.conv_pre(x)
        for i, up in enumerate(self.ups):
            x = up(F.leaky_relu(x, LRELU_SLOPE))
            xs = None
            for j in range(n_kernels):
                y = self.resblocks[i * n_kernels + j](x)
                xs = y if xs is None else xs + y
            x = xs / n_kernels
        x = self.conv_post(F.leaky_relu(x))
        return torch.tanh(x)


class PeriodDiscriminator(nn.Module):
    def __init__(self, period, channels, kernel_size=5, stride=3):
        super().__init__()
        self.period = period
        chans = (1,) + tuple(channels)
        self.convs = nn.ModuleList()
        for i in range(len(channels)):
            s = stride if i < len(channels) - 1 else 1
            self.convs.append(
                weight_norm(nn.Conv2d(chans[i], chans[i + 1], (kernel_size, 1), (s, 1), padding=(_pad(kernel_size), 0)))
            )
        self.conv_post = weight_norm(nn.Conv2d(chans[-1], 1, (3, 1), 1, padding=(1, 0)))

    def forward(self, x):
        fmap = []
        b, c, t = x.shape
        if t % self.period:
            n_pad = self.period - (t % self.period)
            x = F.pad(x, (0, n_pad), "reflect" if n_pad < t else "replicate")
            t = t + n_pad
        x = x.view(b, c, t // self.period, self.period)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            fmap.append(x)
        x = self.conv_post(x)
        fmap.append(x)
        return torch.flatten(x, 1, -1), fmap


class ScaleDiscriminator(nn.Module):
    _kernels = (15, 41, 41, 41, 41, 41, 5)
    _strides = (1, 2, 2, 4, 4, 1, 1)

    def __init__(self, channels, groups, use_spectral_norm=False):
        super().__init__()
        norm = spectral_norm if use_spectral_norm else weight_norm
        chans = (1,) + tuple(channels)
        self.convs = nn.ModuleList()
        for i, (k, s, g) in enumerate(zip(self._kernels, self._strides, groups)):
            cin, cout = chans[i], chans[i + 1]
            g = math.gcd(g, math.gcd(cin, cout))
            self.convs.append(norm(nn.Conv1d(cin, cout, k, s, groups=g, padding=_pad(k))))
        self.conv_post = norm(nn.Conv1d(chans[-1], 1, 3, 1, padding=1))

    def forward(self, x):
        fmap = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            fmap.append(x)
        x = self.conv_post(x)
        fmap.append(x)
        return torch.flatten(x, 1, -1), fmap


class Discriminators(nn.Module):
    """All sub-discriminators; ``forward`` returns ``[(score, fmaps), ...]``."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        mpd = cfg.channels(cfg.mpd_channels)
        msd = cfg.channels(cfg.msd_channels)
        self.period_discriminators = nn.ModuleList(PeriodDiscriminator(p, mpd) for p in cfg.periods)
        self.scale_discriminators = nn.ModuleList(
            ScaleDiscriminator(msd, cfg.msd_groups, use_spectral_norm=(i == 0 and cfg.spectral_norm_first_scale))
            for i in range(cfg.n_scales)
        )
        self.pool = nn.AvgPool1d(4, 2, padding=2)

    def forward(self, x):
        outs = [d(x) for d in self.period_discriminators]
        for i, d in enumerate(self.scale_discriminators):
            if i > 0:
                x = self.pool(x)
            outs.append(d(x))
        return outs


# ---------------------------------------------------------------------------
# losses


def feature_matching_loss(fmaps_real, fmaps_fake):
    loss = 0.0
    for fr, ff in zip(fmaps_real, fmaps_fake):
        for r, g in zip(fr, ff):
            loss = loss + torch.mean(torch.abs(r.detach() - g))
    return loss


def adversarial_g_loss(scores_fake):
    return sum(torch.mean((1 - s) ** 2) for s in scores_fake)


def adversarial_d_loss(scores_real, scores_fake):
    return sum(torch.mean((1 - r) ** 2) + torch.mean(f ** 2) for r, f in zip(scores_real, scores_fake))


def mel_l1(real, fake, stft: StftConfig = StftConfig()):
    return torch.mean(torch.abs(log_mel(real, stft) - log_mel(fake, stft)))


def _as_audio(x) -> torch.Tensor:
    if isinstance(x, Waveform):
        x = torch.from_numpy(x.samples)
    x = torch.as_tensor(x)
    while x.dim() < 3:
        x = x.unsqueeze(0)
    return x


def match_length(real: torch.Tensor, fake: torch.Tensor, tolerance: int = HOP) -> torch.Tensor:
    """Trim or zero-pad ``fake`` along time to ``real``'s length."""
    diff = fake.shape[-1] - real.shape[-1]
    if abs(diff) > tolerance:
        raise LengthMismatch(f"real has {real.shape[-1]} samples, fake {fake.shape[-1]}")
    if diff > 0:
        return fake[..., : real.shape[-1]]
    if diff < 0:
        return F.pad(fake, (0, -diff))
    return fake


def compose_generator_loss(l_adv_g, l_fm, l_mel, lambda_fm=2.0, lambda_mel=45.0):
    """``l_adv_g + lambda_fm * l_fm + lambda_mel * l_mel`` in float64.

    The reported terms are float64 views of the same values, so recomputing
    the sum from a :class:`LossBreakdown` gives the reported total exactly.
    """
    return l_adv_g.double() + lambda_fm * l_fm.double() + lambda_mel * l_mel.double()


def score_pair(d: Discriminators, real, fake):
    """Discriminator outputs for ``real`` and ``fake`` from one batched call.

    A single call means both halves see the same weights (spectral norm
    updates its power-iteration estimate on every call), so identical
    inputs give identical scores and feature maps.
    """
    B = real.shape[0]
    outs = d(torch.cat([real, fake], dim=0))
    real_outs = [(s[:B], [f[:B] for f in fm]) for s, fm in outs]
    fake_outs = [(s[B:], [f[B:] for f in fm]) for s, fm in outs]
    return real_outs, fake_outs


def generator_objective(real, fake, d: Discriminators, lambda_fm=2.0, lambda_mel=45.0, stft=StftConfig()):
    """Differentiable generator loss plus its breakdown.

    ``real`` and ``fake`` are ``(B, 1, L)`` tensors. Returns
    ``(total, LossBreakdown)``; ``total`` is a float64 tensor so that the
    reported total equals the weighted sum of the reported terms exactly.
    """
    fake = match_length(real, fake)
    outs_real, outs_fake = score_pair(d, real, fake)
    scores_r = [s for s, _ in outs_real]
    scores_f = [s for s, _ in outs_fake]
    l_adv_g = adversarial_g_loss(scores_f)
    l_fm = feature_matching_loss([f for _, f in outs_real], [f for _, f in outs_fake])
    l_mel = mel_l1(real.squeeze(1), fake.squeeze(1), stft)
    with torch.no_grad():
        l_adv_d = adversarial_d_loss(scores_r, scores_f)
    total = compose_generator_loss(l_adv_g, l_fm, l_mel, lambda_fm, lambda_mel)
    parts = LossBreakdown(
        l_adv_g=float(l_adv_g.detach()),
        l_adv_d=float(l_adv_d),
        l_fm=float(l_fm.detach()),
        l_mel=float(l_mel.detach()),
        l_g_total=float(total.detach()),
    )
    return total, parts


def discriminator_objective(real, fake, d: Discriminators):
    fake = match_length(real, fake).detach()
    outs_real, outs_fake = score_pair(d, real, fake)
    scores_r = [s for s, _ in outs_real]
    scores_f = [s for s, _ in outs_fake]
    return adversarial_d_loss(scores_r, scores_f)


@dataclass
class LossWeights:
    lambda_fm: float = 2.0
    lambda_mel: float = 45.0


def generator_loss(real, fake, d: Discriminators, cfg: LossWeights = LossWeights()) -> LossBreakdown:
    _, parts = generator_objective(_as_audio(real), _as_audio(fake), d, cfg.lambda_fm, cfg.lambda_mel)
    return parts


def discriminator_loss(real, fake, d: Discriminators) -> float:
    return float(discriminator_objective(_as_audio(real), _as_audio(fake), d).detach())


def generate(z, g: Generator) -> Waveform:
    """Run the generator on one recombined embedding ``(dim, T)``."""
    if not isinstance(z, torch.Tensor):
        z = torch.from_numpy(np.asarray(getattr(z, "values", z)))
    if z.dim() != 2 or z.shape[0] != g.cfg.in_dim:
        raise DimMismatch(f"generator expects ({g.cfg.in_dim}, T) input, got {tuple(z.shape)}")
    dtype = g.conv_post.parametrizations.weight.original1.dtype
    with torch.no_grad():
        audio = g(z.to(dtype).unsqueeze(0))[0, 0]
    return Waveform(audio.float().numpy())
