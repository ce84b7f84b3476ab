"""
Shared latent projector and the alignment objectives computed on it:
dual (joint-anchored) contrastive loss, linear CKA loss, and the InfoNCE
mutual-information balancing loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffMatrix
from .errors import ContractError, DimensionError, NumericError

NORM_FLOOR = 1e-12


def affine(x: DiffMatrix, w: DiffMatrix, b: DiffMatrix | None) -> DiffMatrix:
    """``x @ w + 1 b`` with the bias row expanded explicitly."""
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: input {x.shape} does not fit weights {w.shape}")
    out = ad.matmul(x, w)
    if b is not None:
        out = ad.add(out, ad.matmul(ad.ones(x.shape[0], 1), b))
    return out


_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu, "identity": lambda x: x}


@dataclass
class SharedProjector:
    """Two-layer MLP d -> d_latent -> d_latent applied to every document embedding."""

    w1: DiffMatrix
    b1: DiffMatrix
    w2: DiffMatrix
    b2: DiffMatrix
    activation: str = "tanh"

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, latent: int, activation: str = "tanh"):
        return cls(
            ad.param(rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, latent)), "proj.w1"),
            ad.param(np.zeros((1, latent)), "proj.b1"),
            ad.param(rng.normal(0.0, 1.0 / math.sqrt(latent), (latent, latent)), "proj.w2"),
            ad.param(np.zeros((1, latent)), "proj.b2"),
            activation,
        )

    def parameters(self) -> list[DiffMatrix]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, doc: DiffMatrix) -> DiffMatrix:
        return shared_project(doc, self)


def shared_project(doc, projector: SharedProjector) -> DiffMatrix:
    doc = ad.as_diff(doc)
    act = _ACTIVATIONS[projector.activation]
    hidden = act(affine(doc, projector.w1, projector.b1))
    return affine(hidden, projector.w2, projector.b2)


@dataclass
class LatentBatch:
    """Row i of each matrix comes from document i."""

    z_audio: DiffMatrix
    z_text: DiffMatrix
    z_joint: DiffMatrix

    def __post_init__(self):
        self.z_audio = ad.as_diff(self.z_audio)
        self.z_text = ad.as_diff(self.z_text)
        self.z_joint = ad.as_diff(self.z_joint)
        rows = {self.z_audio.shape[0], self.z_text.shape[0], self.z_joint.shape[0]}
        if len(rows) != 1:
            raise DimensionError(f"LatentBatch row counts differ: {sorted(rows)}")

    @property
    def size(self) -> int:
        return self.z_audio.shape[0]


def _require_pairs(n: int, what: str) -> None:
    if n < 2:
        raise ContractError(f"{what} needs a batch of at least 2 documents, got {n}")


def scaled_sim(x, y, tau: float) -> float:
    """exp(cos(x, y) / tau) for two plain vectors."""
    if tau <= 0:
        raise ContractError("tau must be positive")
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise NumericError("scaled_sim: zero vector has no direction")
    cos = float(x @ y) / (max(nx, NORM_FLOOR) * max(ny, NORM_FLOOR))
    return math.exp(cos / tau)


def unit_rows(z: DiffMatrix) -> DiffMatrix:
    norms = ad.clip(ad.sqrt(ad.row_sum(ad.square(z))), NORM_FLOOR, math.inf)
    return ad.div(z, ad.matmul(norms, ad.ones(1, z.shape[1])))


def _sim_matrix(u: DiffMatrix, v: DiffMatrix, tau: float) -> DiffMatrix:
    return ad.exp(ad.mul_scalar(ad.matmul(u, ad.transpose(v)), 1.0 / tau))


def contrastive_loss(batch: LatentBatch, tau: float, include_positives: bool = False) -> DiffMatrix:
    """Joint-anchored contrastive loss.

    For each document the audio->joint and text->joint positive
    similarities are each divided by their own negative mass
    (modality-modality, modality-joint and joint-joint pairs over j != i),
    summed, and passed through one log. ``include_positives`` adds the
    positive term to each denominator, the usual InfoNCE convention.
    """
    n = batch.size
    _require_pairs(n, "contrastive_loss")
    if tau <= 0:
        raise ContractError("tau must be positive")
    eye = np.eye(n)
    off = ad.const(1.0 - eye)
    diag = ad.const(eye)
    ua, ut, uj = unit_rows(batch.z_audio), unit_rows(batch.z_text), unit_rows(batch.z_joint)
    s_jj = _sim_matrix(uj, uj, tau)

    ratios = []
    for um in (ua, ut):
        s_mm = _sim_matrix(um, um, tau)
        s_mj = _sim_matrix(um, uj, tau)
        omega = ad.row_sum(ad.hadamard(off, s_mm + s_mj + s_jj))
        positive = ad.row_sum(ad.hadamard(diag, s_mj))
        if include_positives:
            omega = omega + positive
        ratios.append(ad.div(positive, omega))
    return -ad.mean(ad.log(ratios[0] + ratios[1]))


def crossmodal_infonce_loss(z_audio, z_text, tau: float) -> DiffMatrix:
    """Symmetric audio<->text InfoNCE on cosine similarity, the conventional
    single contrastive objective used by the ``contrastive_moe`` rung."""
    za, zt = ad.as_diff(z_audio), ad.as_diff(z_text)
    if za.shape[0] != zt.shape[0]:
        raise DimensionError(f"row counts differ: {za.shape} vs {zt.shape}")
    n = za.shape[0]
    _require_pairs(n, "crossmodal_infonce_loss")
    diag = ad.const(np.eye(n))
    logits = ad.mul_scalar(ad.matmul(unit_rows(za), ad.transpose(unit_rows(zt))), 1.0 / tau)
    a2t = ad.sum(ad.hadamard(diag, ad.log_softmax_rows(logits)))
    t2a = ad.sum(ad.hadamard(diag, ad.log_softmax_rows(ad.transpose(logits))))
    return ad.mul_scalar(a2t + t2a, -0.5 / n)


def _centered(x: DiffMatrix, side: str) -> DiffMatrix:
    n = x.shape[0]
    centered = ad.matmul(ad.const(np.eye(n) - 1.0 / n), x)
    scale = max(1.0, float(np.abs(x.values).max()))
    if float(np.abs(centered.values).max()) <= 1e-12 * scale:
        raise NumericError(f"cka: {side} has zero variance after centering")
    return centered


def cka(x, y) -> DiffMatrix:
    """Linear CKA in covariance form, clamped to [0, 1]."""
    x, y = ad.as_diff(x), ad.as_diff(y)
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"cka: sample counts differ, {x.shape} vs {y.shape}")
    if x.shape[0] < 2:
        raise ContractError("cka needs at least 2 samples")
    xc, yc = _centered(x, "X"), _centered(y, "Y")
    cross = ad.sum(ad.square(ad.matmul(ad.transpose(xc), yc)))
    self_x = ad.sqrt(ad.sum(ad.square(ad.matmul(ad.transpose(xc), xc))))
    self_y = ad.sqrt(ad.sum(ad.square(ad.matmul(ad.transpose(yc), yc))))
    return ad.clip(ad.div(cross, ad.hadamard(self_x, self_y)), 0.0, 1.0)


def cka_loss(batch: LatentBatch) -> DiffMatrix:
    return (1.0 - cka(batch.z_joint, batch.z_audio)) + (1.0 - cka(batch.z_joint, batch.z_text))


def infonce_mi(z_joint, z_modality, gamma: float) -> DiffMatrix:
    """InfoNCE lower bound with a dot-product critic at temperature gamma.

    Computed as mean_i log_softmax(Z_joint Z_m^T / gamma)_ii + log n, so it
    never exceeds log n.
    """
    zj, zm = ad.as_diff(z_joint), ad.as_diff(z_modality)
    if zj.shape != zm.shape:
        raise DimensionError(f"infonce_mi: {zj.shape} vs {zm.shape}")
    if gamma <= 0:
        raise ContractError("gamma must be positive")
    n = zj.shape[0]
    _require_pairs(n, "infonce_mi")
    scores = ad.mul_scalar(ad.matmul(zj, ad.transpose(zm)), 1.0 / gamma)
    matched = ad.sum(ad.hadamard(ad.const(np.eye(n)), ad.log_softmax_rows(scores)))
    return ad.add_scalar(ad.mul_scalar(matched, 1.0 / n), math.log(n))


def mi_loss(batch: LatentBatch, gamma: float) -> DiffMatrix:
    """-(I_a + I_t) + (I_a - I_t)^2 over the two InfoNCE estimates."""
    mi_a = infonce_mi(batch.z_joint, batch.z_audio, gamma)
    mi_t = infonce_mi(batch.z_joint, batch.z_text, gamma)
    return ad.square(mi_a - mi_t) - (mi_a + mi_t)
