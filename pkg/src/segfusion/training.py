"""Loss assembly, Adam, and the mini-batch training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from numbers import Real

import numpy as np

from . import autodiff as ad
from .autodiff import DiffMatrix
from .config import RUNG_TERMS, LossConfig, TrainConfig
from .corpus import Document
from .errors import ContractError, NumericError, TrainingDivergedError
from .losses import cka_loss, contrastive_loss, crossmodal_infonce_loss, mi_loss
from .model import ForwardOutput, ModelParams, forward
from .moe import cross_entropy, inverse_frequency_weights

log = logging.getLogger(__name__)

TERMS = ("sup", "con", "cka", "mi")


def total_loss(terms: dict, cfg: LossConfig):
    """``sup + lambda_con*con + lambda_cka*cka + lambda_mi*mi``.

    Terms may be floats or 1x1 DiffMatrix values. Terms whose weight is zero
    are skipped and may be absent.
    """
    cfg.validate()
    total = terms["sup"]
    for name, lam in cfg.weights().items():
        if lam == 0.0:
            continue
        if terms.get(name) is None:
            raise ContractError(f"lambda_{name}={lam} but no {name} term was computed")
        term = terms[name]
        total = total + (lam * term if isinstance(term, Real) else ad.mul_scalar(term, lam))
    return total


def compute_terms(out: ForwardOutput, labels, cfg: LossConfig, class_weights=None) -> dict:
    """Every loss component the rung defines, keyed by TERMS entries."""
    terms = {"sup": cross_entropy(out.probs, labels, class_weights)}
    allowed = RUNG_TERMS[cfg.rung]
    lam = cfg.weights()
    if "con" in allowed:
        if cfg.rung == "dual_contrastive_moe":
            terms["con"] = _maybe(lambda: contrastive_loss(out.latent, cfg.tau, cfg.include_positives), lam["con"])
        else:
            terms["con"] = _maybe(lambda: crossmodal_infonce_loss(out.z_audio, out.z_text, cfg.tau), lam["con"])
    if "cka" in allowed:
        terms["cka"] = _maybe(lambda: cka_loss(out.latent), lam["cka"])
    if "mi" in allowed:
        terms["mi"] = _maybe(lambda: mi_loss(out.latent, cfg.gamma), lam["mi"])
    return terms


def _maybe(fn, lam):
    # Unweighted terms are only traced; a degenerate batch must not abort training.
    if lam > 0:
        return fn()
    try:
        return fn()
    except NumericError:
        return None


class Adam:
    def __init__(self, params: list[DiffMatrix], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values = p.values - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled mini-batches; a trailing batch of one joins the previous one."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


@dataclass
class TrainResult:
    params: ModelParams
    traces: dict[str, list[float | None]] = field(default_factory=dict)


def train(docs: list[Document], cfg: TrainConfig, n_classes: int, seed=None) -> TrainResult:
    """Fit a fresh model. ``seed`` (default ``cfg.seed``) drives both the
    initialisation and the shuffle schedule, so runs are reproducible."""
    cfg.validate()
    if len(docs) < 2:
        raise ContractError("training needs at least 2 documents")
    if cfg.batch_size > len(docs):
        raise ContractError(f"batch size {cfg.batch_size} exceeds corpus size {len(docs)}")
    seq = np.random.SeedSequence(cfg.seed if seed is None else seed)
    init_seq, shuffle_seq = seq.spawn(2)
    params = ModelParams.init(cfg.model, cfg.loss.rung, docs[0].audio.shape[1], docs[0].text.shape[1],
                              n_classes, init_seq)
    labels = np.array([d.label for d in docs])
    weights = inverse_frequency_weights(labels, n_classes) if cfg.loss.class_weighting else None
    opt = Adam(params.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(shuffle_seq)
    traces: dict[str, list] = {name: [] for name in (*TERMS, "total")}

    for epoch in range(cfg.epochs):
        sums: dict[str, list[float]] = {name: [] for name in traces}
        for b, idx in enumerate(batch_indices(len(docs), cfg.batch_size, rng)):
            batch = [docs[i] for i in idx]
            out = forward(params, batch)
            terms = compute_terms(out, labels[idx], cfg.loss, weights)
            loss = total_loss(terms, cfg.loss)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, b, value)
            ad.backward(loss)
            opt.step()
            sums["total"].append(value)
            for name in TERMS:
                if terms.get(name) is not None:
                    sums[name].append(terms[name].item())
        for name, vals in sums.items():
            traces[name].append(float(np.mean(vals)) if vals else None)
        log.debug("epoch %d total %.5f", epoch, traces["total"][-1])
    return TrainResult(params, traces)
