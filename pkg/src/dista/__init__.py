"""Spiking transformer with learnable time constants, temporal attention
windows and attention denoising, written in numpy."""

from .attention import AttentionConfig, attention_map, denoise
from .config import RunConfig, load_config
from .data import Dataset, SyntheticSpec, gen_temporal_synthetic, load_cifar10
from .model import DISTA, ModelConfig
from .neuron import NeuronParams, TauParams, lif_sequence, spike_mode
from .numerics import GradTape, Tensor, cross_entropy, reverse_accumulate
from .training import OptimState, TrainHyper, evaluate, fit, train_epoch

__all__ = [
    "AttentionConfig", "attention_map", "denoise",
    "RunConfig", "load_config",
    "Dataset", "SyntheticSpec", "gen_temporal_synthetic", "load_cifar10",
    "DISTA", "ModelConfig",
    "NeuronParams", "TauParams", "lif_sequence", "spike_mode",
    "GradTape", "Tensor", "cross_entropy", "reverse_accumulate",
    "OptimState", "TrainHyper", "evaluate", "fit", "train_epoch",
]
