"""
Finite-difference verification of every primitive and every loss.

Each check builds a scalar from seeded random inputs and compares backprop
against central differences with :func:`segfusion.autodiff.grad_check`.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import LossConfig, ModelConfig
from .corpus import SyntheticSpec, generate_synthetic
from .losses import LatentBatch, cka_loss, contrastive_loss, crossmodal_infonce_loss, mi_loss
from .model import ModelParams, forward
from .moe import cross_entropy, inverse_frequency_weights
from .training import compute_terms, total_loss

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4
PRIMITIVE_EPS = 1e-6
# Composite losses are sharp (tau = 0.1) yet have gradient entries near 1e-7,
# where a two-point difference is swamped by cancellation. The fourth-order
# stencil at a wider step keeps both error sources well below tolerance.
COMPOSITE_EPS = 3e-4
COMPOSITE_STENCIL = 4


def _weights(rng, shape):
    # bounded away from zero so no gradient entry is vanishingly small
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 1.5, size=shape)


def _away_from(rng, shape, lo=0.2, hi=1.5):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _weighted(out, w):
    return ad.sum(ad.hadamard(out, ad.const(w)))


def _unary(op, sampler):
    def build(rng):
        x = ad.param(sampler(rng))
        w = _weights(rng, op(ad.const(x.values)).shape)
        return (lambda x_: _weighted(op(x_), w)), [x]
    return build


def _binary(op, sample_a, sample_b):
    def build(rng):
        a, b = ad.param(sample_a(rng)), ad.param(sample_b(rng))
        w = _weights(rng, op(ad.const(a.values), ad.const(b.values)).shape)
        return (lambda a_, b_: _weighted(op(a_, b_), w)), [a, b]
    return build


def _clip_points(rng, shape):
    # half inside (-0.1, 0.1), half outside, none near the edges
    centres = rng.choice([-0.5, -0.05, 0.05, 0.5], size=shape)
    return centres + rng.uniform(-0.02, 0.02, size=shape)


def _normal(shape):
    return lambda rng: rng.normal(size=shape)


def _positive(shape):
    return lambda rng: rng.uniform(0.5, 2.0, size=shape)


PRIMITIVES: dict[str, Callable] = {
    "matmul": _binary(ad.matmul, _normal((3, 4)), _normal((4, 2))),
    "add": _binary(ad.add, _normal((2, 3)), _normal((2, 3))),
    "sub": _binary(ad.sub, _normal((2, 3)), _normal((2, 3))),
    "hadamard": _binary(ad.hadamard, _normal((2, 3)), _normal((2, 3))),
    "div": _binary(ad.div, _normal((2, 3)), lambda rng: _away_from(rng, (2, 3), 0.5, 2.0)),
    "mul_scalar": _unary(lambda x: ad.mul_scalar(x, -1.7), _normal((2, 3))),
    "add_scalar": _unary(lambda x: ad.add_scalar(x, 0.3), _normal((2, 3))),
    "exp": _unary(ad.exp, _normal((2, 3))),
    "log": _unary(ad.log, _positive((2, 3))),
    "sqrt": _unary(ad.sqrt, _positive((2, 3))),
    "square": _unary(ad.square, _normal((3, 3))),
    "relu": _unary(ad.relu, lambda rng: _away_from(rng, (3, 3))),
    "tanh": _unary(ad.tanh, _normal((2, 3))),
    "clip": _unary(lambda x: ad.clip(x, -0.1, 0.1), lambda rng: _clip_points(rng, (3, 3))),
    "sum": _unary(ad.sum, _normal((2, 3))),
    "mean": _unary(ad.mean, _normal((2, 3))),
    "row_sum": _unary(ad.row_sum, _normal((3, 4))),
    "col_sum": _unary(ad.col_sum, _normal((3, 4))),
    "transpose": _unary(ad.transpose, _normal((2, 3))),
    "concat_cols": _binary(ad.concat_cols, _normal((2, 3)), _normal((2, 5))),
    "concat_rows": _binary(ad.concat_rows, _normal((2, 3)), _normal((4, 3))),
    "slice_rows": _unary(lambda x: ad.slice_rows(x, 1, 3), _normal((4, 2))),
    "slice_cols": _unary(lambda x: ad.slice_cols(x, 0, 2), _normal((2, 4))),
    "softmax_rows": _unary(ad.softmax_rows, _normal((2, 3))),
    "log_softmax_rows": _unary(ad.log_softmax_rows, _normal((2, 3))),
}


def _latent_batch(rng, n, d):
    mats = [ad.param(rng.normal(size=(n, d))) for _ in range(3)]
    return mats


def _loss_con(rng, cfg):
    mats = _latent_batch(rng, int(rng.integers(3, 7)), int(rng.integers(3, 6)))
    return (lambda a, t, j: contrastive_loss(LatentBatch(a, t, j), cfg.tau, cfg.include_positives)), mats


def _loss_con_single(rng, cfg):
    mats = _latent_batch(rng, int(rng.integers(3, 7)), int(rng.integers(3, 6)))[:2]
    return (lambda a, t: crossmodal_infonce_loss(a, t, cfg.tau)), mats


def _loss_cka(rng, cfg):
    mats = _latent_batch(rng, int(rng.integers(4, 8)), int(rng.integers(2, 5)))
    return (lambda a, t, j: cka_loss(LatentBatch(a, t, j))), mats


def _loss_mi(rng, cfg):
    mats = [ad.param(0.5 * m.values) for m in _latent_batch(rng, int(rng.integers(3, 7)), int(rng.integers(3, 6)))]
    return (lambda a, t, j: mi_loss(LatentBatch(a, t, j), cfg.gamma)), mats


def _loss_sup(rng, cfg):
    n, c = int(rng.integers(3, 7)), int(rng.integers(2, 5))
    logits = ad.param(rng.normal(size=(n, c)))
    labels = rng.integers(0, c, size=n)
    weights = inverse_frequency_weights(labels, c) if cfg.class_weighting else None
    return (lambda z: cross_entropy(ad.softmax_rows(z), labels, weights)), [logits]


SMALL_MODEL = ModelConfig(dim=4, heads=2, latent=3, n_experts=2, expert_sizes=(4, 3), head_sizes=(3, 3))


def full_model_case(rng, cfg: LossConfig, n_docs: int = 4, model_cfg: ModelConfig = SMALL_MODEL):
    """Total loss of the whole network on a small synthetic batch, as a
    function of every trainable parameter."""
    spec = SyntheticSpec(n_docs=n_docs, n_classes=3, segments=3, d_audio=4, d_text=3, latent_dim=2,
                         seed=int(rng.integers(1 << 31)))
    docs = generate_synthetic(spec)
    params = ModelParams.init(model_cfg, cfg.rung, 4, 3, 3, int(rng.integers(1 << 31)))
    labels = np.array([d.label for d in docs])
    weights = inverse_frequency_weights(labels, 3) if cfg.class_weighting else None

    def f(*_):
        out = forward(params, docs)
        return total_loss(compute_terms(out, labels, cfg, weights), cfg)

    return f, params.parameters()


def _loss_total(rng, cfg):
    return full_model_case(rng, cfg)


COMPOSITES = {
    "L_con": _loss_con,
    "L_con_single": _loss_con_single,
    "L_cka": _loss_cka,
    "L_mi": _loss_mi,
    "L_sup": _loss_sup,
    "L_total": _loss_total,
}


def run_suite(cfg: LossConfig | None = None, instances: int = 10, seed: int = 0,
              primitives: bool = True, composites: bool = True,
              full_model_instances: int | None = None) -> dict[str, tuple[float, float]]:
    """Worst relative error per check over ``instances`` seeded draws.

    Returns ``{name: (max_error, tolerance)}``.
    """
    cfg = (cfg or LossConfig()).for_rung("dual_contrastive_moe")
    if cfg.lambda_con == 0 and cfg.lambda_cka == 0 and cfg.lambda_mi == 0:
        cfg = replace(cfg, lambda_con=1.0, lambda_cka=0.5, lambda_mi=0.5)
    results = {}
    if primitives:
        for name, build in PRIMITIVES.items():
            rng = np.random.default_rng([seed, 1, len(results)])
            worst = 0.0
            for _ in range(instances):
                f, inputs = build(rng)
                worst = max(worst, ad.grad_check(f, inputs, eps=PRIMITIVE_EPS))
            results[name] = (worst, PRIMITIVE_TOL)
    if composites:
        for name, build in COMPOSITES.items():
            rng = np.random.default_rng([seed, 2, len(results)])
            count = instances
            if name == "L_total" and full_model_instances is not None:
                count = full_model_instances
            worst = 0.0
            for _ in range(count):
                f, inputs = build(rng, cfg)
                worst = max(worst, ad.grad_check(f, inputs, eps=COMPOSITE_EPS, stencil=COMPOSITE_STENCIL))
            results[name] = (worst, COMPOSITE_TOL)
    return results
