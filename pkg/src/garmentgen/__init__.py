"""Garment-conditioned toy latent diffusion, end to end and from scratch:
tensor autodiff, gated low-rank reference encoding, adaptive attention
fusion, two-stage training, prompt enrichment, and a benchmark harness.
"""

from .autodiff import Tape, Tensor, grad_check, precision
from .conditioning import (AdaptiveAttentionBlock, GatedLoraLayer, InputTag,
                           ParamPartition, adaptive_attention, enumerate_trainable)
from .data import Dataset, GarmentSpec, gen_dataset
from .diffusion import (GuidanceConfig, NoiseSchedule, cfg_combine, ddim_sample,
                        diffusion_loss, forward_diffuse, make_schedule)
from .enrich import EnrichedPrompt, enrich_external
from .enrich import enrich as enrich_prompt
from .errors import GarmentGenError
from .evaluate import run_benchmark, text_score, texture_sim
from .model import ModelConfig, ReferenceFeatureSet, ToyUNet, generate
from .training import TrainConfig, report_params, train

__version__ = "0.1.0"

__all__ = [
    "AdaptiveAttentionBlock", "Dataset", "EnrichedPrompt", "GarmentGenError",
    "GarmentSpec", "GatedLoraLayer", "GuidanceConfig", "InputTag", "ModelConfig",
    "NoiseSchedule", "ParamPartition", "ReferenceFeatureSet", "Tape", "Tensor",
    "ToyUNet", "TrainConfig", "adaptive_attention", "cfg_combine", "ddim_sample",
    "diffusion_loss", "enrich_external", "enrich_prompt", "enumerate_trainable",
    "forward_diffuse", "gen_dataset", "generate", "grad_check", "make_schedule",
    "precision", "report_params", "run_benchmark", "text_score", "texture_sim",
    "train",
]
