"""Age estimation with Fourier-domain token mixing, contrastive prompt alignment
and ensemble-driven error correction, on a numpy autodiff engine."""

from .checkpoint import load_checkpoint, save_checkpoint
from .clip_align import (AgeModel, AlignmentConfig, matching_loss, predict_age, similarity_matrix,
                         tokenize_prompt)
from .config import RunConfig
from .correction import CorrectionConfig, correction_loop
from .data import generate_synthetic_dataset, load_dataset
from .fourier import ComplexPair, amplitude_phase, dft2d, idft2d, naive_dft_oracle
from .fourierformer import FPEConfig, FourierFormer, fpe_block_forward
from .metrics import cs_metric, mae_metric
from .pipeline import evaluate, train_pipeline
from .tensor import ContractError, DimensionError, Tensor, finite_diff_check, no_grad

__version__ = "0.1.0"
