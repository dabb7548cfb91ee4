"""Modality-routed selective state-space sequence models.

A from-scratch numpy implementation of a Mamba-style block whose four
projections can each be decoupled per token modality, plus the training
objectives (uniform autoregressive, DDPM noise prediction, and their
combination), synthetic multi-modal data, a deterministic trainer, and the
efficiency-analysis tooling (performance gain, loss matching, FLOPs
accounting, decoupling ablations).
"""

__version__ = "0.1.0"

from .block import BlockDims, SparsityConfig, mom_block_forward, selective_scan
from .data import Batch, DataConfig, ModalitySpec, gen_batch
from .model import Model, ModelConfig, build_model, forward_diffusion_path, forward_lm
from .routing import ModalityMask, RoutedWeights, modal_linear, modality_partition
from .tensor import GradientTape, Tensor, backward, count_flops, grad_check
from .trainer import OptimConfig, train

__all__ = [
    "BlockDims", "SparsityConfig", "mom_block_forward", "selective_scan",
    "Batch", "DataConfig", "ModalitySpec", "gen_batch",
    "Model", "ModelConfig", "build_model", "forward_diffusion_path", "forward_lm",
    "ModalityMask", "RoutedWeights", "modal_linear", "modality_partition",
    "GradientTape", "Tensor", "backward", "count_flops", "grad_check",
    "OptimConfig", "train",
    "__version__",
]
