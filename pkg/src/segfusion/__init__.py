"""Segment-to-document multimodal fusion with contrastive, CKA and MI
objectives, a mixture-of-experts classifier, and a small reverse-mode
differentiation engine underneath."""

from .autodiff import DiffMatrix, backward, grad_check
from .config import RUNGS, LossConfig, ModelConfig, RunConfig, TrainConfig
from .corpus import Document, SyntheticSpec, generate_synthetic, load_corpus, save_corpus
from .evaluation import auc_macro_ovr, kfold_cv, run_ablation, stratified_folds
from .model import ModelParams, forward, predict_proba
from .training import train

__all__ = [
    "DiffMatrix", "backward", "grad_check",
    "RUNGS", "LossConfig", "ModelConfig", "RunConfig", "TrainConfig",
    "Document", "SyntheticSpec", "generate_synthetic", "load_corpus", "save_corpus",
    "auc_macro_ovr", "kfold_cv", "run_ablation", "stratified_folds",
    "ModelParams", "forward", "predict_proba", "train",
]
