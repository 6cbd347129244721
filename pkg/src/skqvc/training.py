"""Reconstruction training: features -> quantize -> disentangle -> decode -> losses."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .codebook import Codebook, QuantizedSequence, load_codebook, quantize
from .dataset import load_corpus, utterance_mel_mean
from .decoder import (
    DiscriminatorConfig,
    Discriminators,
    Generator,
    GeneratorConfig,
    LossBreakdown,
    discriminator_objective,
    generator_objective,
)
from .disentangler import DisentanglerParams, disentangle_quantized, recombine
from .errors import (
    EmptyDataset,
    IncompatibleCheckpoint,
    InvalidConfig,
    MisalignedPair,
    NonFiniteLoss,
    UnreadableFile,
)
from .features import HOP, FeatureSequence, make_encoder

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "skqvc-checkpoint"
CHECKPOINT_VERSION = 1
EXTERNAL_SPEAKER_DIM = 80


@dataclass
class TrainConfig:
    codebook_path: str = ""
    lambda_fm: float = 2.0
    lambda_mel: float = 45.0
    lr: float = 2e-4
    adam_b1: float = 0.8
    adam_b2: float = 0.99
    weight_decay: float = 0.01
    lr_decay: float = 0.999
    batch_size: int = 4
    segment_frames: int = 32
    seed: int = 0
    max_steps: int = 10000
    svcomp_enabled: bool = True
    bottleneck: bool = True
    d_v: int = 8
    encoder: str = "pseudo(0)"
    external_speaker: bool = False
    speaker_avg: str = "crop"  # crop-level S_avg at train time
    gen_channels: int = 128
    gen_resblock_kernels: tuple = (3, 7, 11)
    disc_scale: float = 0.25
    checkpoint_every: int = 0
    out_dir: str = ""
    log_path: str = ""

    def __post_init__(self):
        self.gen_resblock_kernels = tuple(int(k) for k in self.gen_resblock_kernels)

    @property
    def variation_mode(self) -> str:
        if not self.svcomp_enabled:
            return "none"
        return "svcomp" if self.bottleneck else "residual"

    def validate(self):
        if self.external_speaker and self.svcomp_enabled:
            raise InvalidConfig("the external speaker embedding is only used with svcomp_enabled = false")
        if self.segment_frames < 1 or self.batch_size < 1:
            raise InvalidConfig("segment_frames and batch_size must be >= 1")
        if self.speaker_avg != "crop":
            raise InvalidConfig("only crop-level speaker averaging is implemented")
        return self

    def generator_config(self, dim: int) -> GeneratorConfig:
        ks = self.gen_resblock_kernels
        return GeneratorConfig(
            in_dim=dim,
            base_channels=self.gen_channels,
            resblock_kernels=ks,
            resblock_dilations=((1, 3, 5),) * len(ks),
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(scale=self.disc_scale)

    # -- flat "key = value" text form ------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        types = {f.name: f.default for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in d.items():
            if key not in types:
                raise InvalidConfig(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, types[key])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(read_config_file(path))


def _coerce(key, raw, default):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise InvalidConfig(f"bad value for {key}: {raw!r}") from exc
    return raw


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{path}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# model + checkpoint


class VoiceConversionModel(nn.Module):
    """Trainable parts of the converter: bottlenecks, generator, optional speaker adapter."""

    def __init__(self, cfg: TrainConfig, dim: int, ext_dim: int = EXTERNAL_SPEAKER_DIM):
        super().__init__()
        self.disentangler = DisentanglerParams(dim, cfg.d_v, seed=cfg.seed, mode=cfg.variation_mode)
        self.generator = Generator(cfg.generator_config(dim))
        self.speaker_adapter = nn.Linear(ext_dim, dim) if cfg.external_speaker else None

    def decoder_input(self, W: FeatureSequence, Q: QuantizedSequence, speaker=None) -> torch.Tensor:
        """The generator input for one utterance, ``(dim, T)``.

        ``speaker`` overrides the utterance's own residual average: a
        ``dim``-vector is used as is, anything else goes through the
        external speaker adapter.
        """
        ds = disentangle_quantized(W, Q, self.disentangler)
        if speaker is None and self.speaker_adapter is not None:
            raise InvalidConfig("this model was trained with external speaker embeddings; pass one")
        if speaker is None:
            spk = ds.s_avg
        else:
            spk = torch.as_tensor(np.asarray(speaker), dtype=self.disentangler.dtype)
            if spk.shape[-1] != self.disentangler.dim:
                if self.speaker_adapter is None:
                    raise InvalidConfig(f"speaker vector of size {spk.shape[-1]} needs a trained adapter")
                spk = self.speaker_adapter(spk)
        return recombine(ds.C, spk)


@dataclass
class Checkpoint:
    config: TrainConfig
    model: VoiceConversionModel
    discriminators: Discriminators
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    sched_g: torch.optim.lr_scheduler.LRScheduler
    sched_d: torch.optim.lr_scheduler.LRScheduler
    step: int
    codebook_checksum: str
    rng: np.random.Generator
    dim: int
    ext_dim: int = EXTERNAL_SPEAKER_DIM
    steps_per_epoch: int = 1
    codebook: Codebook | None = None


def _optimizers(cfg: TrainConfig, model, disc):
    kw = dict(lr=cfg.lr, betas=(cfg.adam_b1, cfg.adam_b2), weight_decay=cfg.weight_decay)
    opt_g = torch.optim.AdamW(model.parameters(), **kw)
    opt_d = torch.optim.AdamW(disc.parameters(), **kw)
    sched_g = torch.optim.lr_scheduler.ExponentialLR(opt_g, gamma=cfg.lr_decay)
    sched_d = torch.optim.lr_scheduler.ExponentialLR(opt_d, gamma=cfg.lr_decay)
    return opt_g, opt_d, sched_g, sched_d


def init_checkpoint(cfg: TrainConfig, codebook: Codebook, ext_dim: int = EXTERNAL_SPEAKER_DIM) -> Checkpoint:
    cfg.validate()
    if not codebook.frozen:
        raise InvalidConfig("training needs a frozen codebook")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = VoiceConversionModel(cfg, codebook.dim, ext_dim)
        disc = Discriminators(cfg.discriminator_config())
    opt_g, opt_d, sched_g, sched_d = _optimizers(cfg, model, disc)
    return Checkpoint(
        config=cfg,
        model=model,
        discriminators=disc,
        opt_g=opt_g,
        opt_d=opt_d,
        sched_g=sched_g,
        sched_d=sched_d,
        step=0,
        codebook_checksum=codebook.checksum(),
        rng=np.random.default_rng(cfg.seed),
        dim=codebook.dim,
        ext_dim=ext_dim,
        codebook=codebook,
    )


def save_checkpoint(path, state: Checkpoint):
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_text(),
        "step": state.step,
        "dim": state.dim,
        "ext_dim": state.ext_dim,
        "steps_per_epoch": state.steps_per_epoch,
        "codebook_checksum": state.codebook_checksum,
        "rng": state.rng.bit_generator.state,
        "model": state.model.state_dict(),
        "discriminators": state.discriminators.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "sched_g": state.sched_g.state_dict(),
        "sched_d": state.sched_d.state_dict(),
    }
    torch.save(blob, path)


def load_checkpoint(path, codebook: Codebook | None = None) -> Checkpoint:
    """Restore a checkpoint; the codebook (given or from ``codebook_path``) must match its checksum."""
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpoint(f"{path}: not an SKQVC checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: checkpoint version {blob.get('version')}")
    lines = [ln for ln in blob["config"].splitlines() if ln.strip()]
    cfg = TrainConfig.from_dict(dict(ln.split(" = ", 1) for ln in lines))
    if codebook is None and cfg.codebook_path and Path(cfg.codebook_path).is_file():
        codebook = load_codebook(cfg.codebook_path)
    if codebook is not None and codebook.checksum() != blob["codebook_checksum"]:
        raise IncompatibleCheckpoint("codebook checksum does not match the one the model was trained with")

    with torch.random.fork_rng(devices=[]):
        model = VoiceConversionModel(cfg, blob["dim"], blob["ext_dim"])
        disc = Discriminators(cfg.discriminator_config())
    model.load_state_dict(blob["model"])
    disc.load_state_dict(blob["discriminators"])
    opt_g, opt_d, sched_g, sched_d = _optimizers(cfg, model, disc)
    opt_g.load_state_dict(blob["opt_g"])
    opt_d.load_state_dict(blob["opt_d"])
    sched_g.load_state_dict(blob["sched_g"])
    sched_d.load_state_dict(blob["sched_d"])
    rng = np.random.default_rng()
    rng.bit_generator.state = blob["rng"]
    return Checkpoint(
        config=cfg,
        model=model,
        discriminators=disc,
        opt_g=opt_g,
        opt_d=opt_d,
        sched_g=sched_g,
        sched_d=sched_d,
        step=blob["step"],
        codebook_checksum=blob["codebook_checksum"],
        rng=rng,
        dim=blob["dim"],
        ext_dim=blob["ext_dim"],
        steps_per_epoch=blob["steps_per_epoch"],
        codebook=codebook,
    )


# ---------------------------------------------------------------------------
# training


def _check_aligned(w, W):
    if abs(W.T * HOP - w.length) > HOP:
        raise MisalignedPair(f"{W.T} frames do not match {w.length} samples (hop {HOP})")


def train_step(batch, state: Checkpoint) -> tuple[Checkpoint, LossBreakdown]:
    """One discriminator update followed by one generator + bottleneck update.

    ``batch`` items are ``(Waveform, FeatureSequence)`` or, for models with
    an external speaker adapter, ``(Waveform, FeatureSequence, embedding)``.
    A random ``segment_frames`` crop is taken from each item using the
    checkpoint's RNG; the speaker average is taken over the crop.
    """
    cfg = state.config
    cb = state.codebook
    if cb is None or not cb.frozen:
        raise InvalidConfig("train_step needs the frozen codebook attached to the checkpoint")
    if cb.checksum() != state.codebook_checksum:
        raise IncompatibleCheckpoint("codebook changed since the checkpoint was created")
    seg = cfg.segment_frames
    model, disc = state.model, state.discriminators

    zs, reals = [], []
    for item in batch:
        w, W = item[0], item[1]
        ext = item[2] if len(item) > 2 else None
        _check_aligned(w, W)
        T = min(W.T, w.length // HOP)
        if T < seg:
            raise InvalidConfig(f"clip of {T} frames is shorter than segment_frames={seg}")
        t0 = int(state.rng.integers(0, T - seg + 1))
        Wc = FeatureSequence(W.values[:, t0:t0 + seg])
        zs.append(model.decoder_input(Wc, quantize(Wc, cb), ext))
        reals.append(torch.from_numpy(w.samples[t0 * HOP:(t0 + seg) * HOP]))
    z = torch.stack(zs)
    real = torch.stack(reals).unsqueeze(1).to(z.dtype)

    model.train()
    disc.train()
    fake = model.generator(z)

    state.opt_d.zero_grad(set_to_none=True)
    l_d = discriminator_objective(real, fake, disc)
    if not torch.isfinite(l_d):
        raise NonFiniteLoss(f"non-finite discriminator loss at step {state.step + 1}: {float(l_d.detach())}")
    l_d.backward()
    state.opt_d.step()

    state.opt_g.zero_grad(set_to_none=True)
    total, parts = generator_objective(real, fake, disc, cfg.lambda_fm, cfg.lambda_mel)
    parts.l_adv_d = float(l_d.detach())
    if not all(math.isfinite(v) for v in parts.as_dict().values()):
        raise NonFiniteLoss(f"non-finite loss at step {state.step + 1}: {parts.as_dict()}")
    total.backward()
    state.opt_g.step()

    state.step += 1
    if state.step % max(1, state.steps_per_epoch) == 0:
        state.sched_g.step()
        state.sched_d.step()
    return state, parts


def format_log_line(step: int, parts: LossBreakdown) -> str:
    return (
        f"step={step} l_adv_g={parts.l_adv_g:.6f} l_fm={parts.l_fm:.6f} "
        f"l_mel={parts.l_mel:.6f} l_adv_d={parts.l_adv_d:.6f}"
    )


def parse_log_line(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, v = tok.split("=", 1)
        out[k] = int(v) if k == "step" else float(v)
    return out


def prepare_batch_items(utts, cfg: TrainConfig):
    items = []
    for u in utts:
        if cfg.external_speaker:
            items.append((u.waveform, u.features, utterance_mel_mean(u.waveform)))
        else:
            items.append((u.waveform, u.features))
    return items


def fit(dataset, cfg: TrainConfig, resume: Checkpoint | None = None, codebook: Codebook | None = None,
        on_step=None) -> Checkpoint:
    """Train until ``cfg.max_steps`` (counted from step 0, so resuming continues the count).

    ``dataset`` is a directory of WAV files or a list of already-encoded
    :class:`Utterance` objects.
    """
    cfg.validate()
    if isinstance(dataset, (str, Path)):
        utts = load_corpus(dataset, make_encoder(cfg.encoder))
    else:
        utts = list(dataset)
        if not utts:
            raise EmptyDataset("no utterances to train on")
    if codebook is None:
        codebook = resume.codebook if resume is not None and resume.codebook is not None else load_codebook(cfg.codebook_path)
    shortest = min(min(u.features.T, u.waveform.length // HOP) for u in utts)
    if cfg.segment_frames > shortest:
        raise InvalidConfig(f"segment_frames={cfg.segment_frames} exceeds the shortest clip ({shortest} frames)")

    state = resume if resume is not None else init_checkpoint(cfg, codebook)
    state.codebook = codebook
    state.config.max_steps = cfg.max_steps
    state.steps_per_epoch = math.ceil(len(utts) / cfg.batch_size)
    items = prepare_batch_items(utts, state.config)
    log_fh = open(cfg.log_path, "a") if cfg.log_path else None
    try:
        while state.step < cfg.max_steps:
            pick = state.rng.choice(len(items), size=min(cfg.batch_size, len(items)), replace=False)
            state, parts = train_step([items[i] for i in pick], state)
            line = format_log_line(state.step, parts)
            log.debug(line)
            if log_fh:
                log_fh.write(line + "\n")
            if on_step is not None:
                on_step(state, parts)
            if cfg.checkpoint_every and cfg.out_dir and state.step % cfg.checkpoint_every == 0:
                out = Path(cfg.out_dir)
                out.mkdir(parents=True, exist_ok=True)
                save_checkpoint(out / f"ckpt_{state.step:07d}.bin", state)
                save_checkpoint(out / "latest.bin", state)
    finally:
        if log_fh:
            log_fh.close()
    return state
