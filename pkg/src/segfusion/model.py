"""
Full fusion network: per-modality projection and attention encoders, the
cross-modal joint encoder, the shared projector, and the MoE classifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import (
    AttentionParams,
    cross_modal_attention,
    joint_document_embedding,
    modality_document_embedding,
    project_to_common,
)
from .autodiff import DiffMatrix
from .config import RUNGS, ModelConfig
from .corpus import Document
from .errors import ConfigurationError, ContractError, DimensionError
from .losses import LatentBatch, SharedProjector, shared_project
from .moe import MoEParams, classify, moe_forward

JOINT_RUNGS = frozenset({"contrastive_moe", "dual_contrastive_moe"})


@dataclass
class ModelParams:
    rung: str
    w_in_audio: DiffMatrix
    w_in_text: DiffMatrix
    enc_audio: AttentionParams
    enc_text: AttentionParams
    projector: SharedProjector
    moe: MoEParams
    cross_a2t: AttentionParams | None = None
    cross_t2a: AttentionParams | None = None
    joint: AttentionParams | None = None

    @property
    def has_joint(self) -> bool:
        return self.joint is not None

    @classmethod
    def init(cls, cfg: ModelConfig, rung: str, d_audio: int, d_text: int, n_classes: int,
             seed: int | np.random.SeedSequence = 0) -> "ModelParams":
        """Random initialisation; the transfer rung gets a single expert
        (a plain MLP head) and no joint encoder."""
        if rung not in RUNGS:
            raise ConfigurationError(f"unknown rung {rung!r}")
        cfg.validate()
        rng = np.random.default_rng(seed)
        d = cfg.dim
        w_in_a = ad.param(rng.normal(0.0, 1.0 / math.sqrt(d_audio), (d_audio, d)), "w_in_audio")
        w_in_t = ad.param(rng.normal(0.0, 1.0 / math.sqrt(d_text), (d_text, d)), "w_in_text")
        enc_a = AttentionParams.init(rng, d, cfg.heads, prefix="enc_audio")
        enc_t = AttentionParams.init(rng, d, cfg.heads, prefix="enc_text")
        projector = SharedProjector.init(rng, d, cfg.latent, cfg.projector_activation)
        joint = rung in JOINT_RUNGS
        n_views = 3 if joint else 2
        n_experts = 1 if rung == "transfer" else cfg.n_experts
        moe = MoEParams.init(rng, n_views * cfg.latent, n_classes, n_experts,
                             tuple(cfg.expert_sizes), tuple(cfg.head_sizes))
        extra = {}
        if joint:
            extra = dict(
                cross_a2t=AttentionParams.init(rng, d, 1, output=False, pool=False, prefix="cross_a2t"),
                cross_t2a=AttentionParams.init(rng, d, 1, output=False, pool=False, prefix="cross_t2a"),
                joint=AttentionParams.init(rng, d, cfg.heads, prefix="joint"),
            )
        return cls(rung, w_in_a, w_in_t, enc_a, enc_t, projector, moe, **extra)

    def parameters(self) -> list[DiffMatrix]:
        out = [self.w_in_audio, self.w_in_text, *self.enc_audio.parameters(), *self.enc_text.parameters()]
        for block in (self.cross_a2t, self.cross_t2a, self.joint):
            if block is not None:
                out += block.parameters()
        out += self.projector.parameters()
        out += self.moe.parameters()
        return out

    def state(self) -> dict[str, np.ndarray]:
        state = {}
        for p in self.parameters():
            if p.name in state:
                raise ContractError(f"duplicate parameter name {p.name}")
            state[p.name] = np.array(p.values)
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise ContractError(f"missing parameter {p.name}")
            p.values = state[p.name]


@dataclass
class ForwardOutput:
    probs: DiffMatrix
    latent: LatentBatch | None
    z_audio: DiffMatrix
    z_text: DiffMatrix


def stack_documents(docs: list[Document]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-stack segments of every document plus the row->document index."""
    if not docs:
        raise ContractError("empty batch")
    audio = np.vstack([d.audio for d in docs])
    text = np.vstack([d.text for d in docs])
    groups = np.repeat(np.arange(len(docs)), [d.n_segments for d in docs])
    return audio, text, groups


def forward(params: ModelParams, docs: list[Document]) -> ForwardOutput:
    audio, text, groups = stack_documents(docs)
    if audio.shape[0] != text.shape[0]:
        raise DimensionError("audio and text segment counts differ within the batch")
    s_a = project_to_common(audio, params.w_in_audio)
    s_t = project_to_common(text, params.w_in_text)
    d_a = modality_document_embedding(s_a, params.enc_audio, groups)
    d_t = modality_document_embedding(s_t, params.enc_text, groups)
    n = len(docs)

    if params.has_joint:
        a2t = cross_modal_attention(s_a, s_t, params.cross_a2t, groups, groups)
        t2a = cross_modal_attention(s_t, s_a, params.cross_t2a, groups, groups)
        d_j = joint_document_embedding(a2t, t2a, params.joint, groups)
        z_all = shared_project(ad.concat_rows(d_a, d_t, d_j), params.projector)
        z_a = ad.slice_rows(z_all, 0, n)
        z_t = ad.slice_rows(z_all, n, 2 * n)
        z_j = ad.slice_rows(z_all, 2 * n, 3 * n)
        features = ad.concat_cols(z_a, z_j, z_t)
        latent = LatentBatch(z_a, z_t, z_j)
    else:
        z_all = shared_project(ad.concat_rows(d_a, d_t), params.projector)
        z_a = ad.slice_rows(z_all, 0, n)
        z_t = ad.slice_rows(z_all, n, 2 * n)
        features = ad.concat_cols(z_a, z_t)
        latent = None

    probs = classify(moe_forward(features, params.moe), params.moe)
    return ForwardOutput(probs, latent, z_a, z_t)


def predict_proba(params: ModelParams, docs: list[Document], chunk: int = 32) -> np.ndarray:
    parts = [forward(params, docs[i:i + chunk]).probs.values for i in range(0, len(docs), chunk)]
    return np.vstack(parts)
