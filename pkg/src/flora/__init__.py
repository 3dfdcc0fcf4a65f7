"""Modality-specific low-rank adapters (FLoRA) on a frozen encoder-decoder transformer."""
__version__ = "0.1.0"

from .adapters import (ALL_MODALITIES, AdapterError, AdapterParams, AdapterSet, AdapterSiteId,
                       Modality, dropout_mask, fuse_site, init_adapters, set_active)
from .backbone import ModelConfig, ParamStore, count_params, init_backbone
from .checkpoint import (CheckpointError, load_adapters, load_backbone, save_adapters,
                         save_backbone)
from .data import GenConfig, Sample, bayes_oracle, generate, generate_samples, read_jsonl
from .metrics import ScoreSet, compute_eer, compute_fa_at_fr, det_points
from .numeric import Tape, Tensor, grad_check
from .train import TrainConfig, evaluate, new_model, pretrain_backbone, train
