"""One-shot voice conversion by K-means quantization with speaking-variation compensation."""

from .codebook import Codebook, fit_codebook, load_codebook, quantize, residual, save_codebook
from .conversion import convert
from .disentangler import DisentanglerParams, disentangle, recombine, speaker_embedding, svcomp
from .features import FeatureSequence, Waveform, compute_mel, load_features, load_waveform, pseudo_encode
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Codebook",
    "DisentanglerParams",
    "FeatureSequence",
    "TrainConfig",
    "Waveform",
    "compute_mel",
    "convert",
    "disentangle",
    "fit",
    "fit_codebook",
    "load_checkpoint",
    "load_codebook",
    "load_features",
    "load_waveform",
    "pseudo_encode",
    "quantize",
    "recombine",
    "residual",
    "save_checkpoint",
    "save_codebook",
    "speaker_embedding",
    "svcomp",
]
