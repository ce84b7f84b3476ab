"""Densely gated mixture-of-experts head with an MLP classifier on top."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffMatrix
from .errors import ContractError, DimensionError
from .losses import affine


def _dense(rng, fan_in: int, fan_out: int, name: str) -> tuple[DiffMatrix, DiffMatrix]:
    w = ad.param(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)), f"{name}.w")
    b = ad.param(np.zeros((1, fan_out)), f"{name}.b")
    return w, b


@dataclass
class MLP:
    """Stack of affine layers with tanh between them.

    ``final_activation`` controls whether the last layer is also squashed.
    """

    layers: list[tuple[DiffMatrix, DiffMatrix]]
    final_activation: bool = True

    @classmethod
    def init(cls, rng, sizes: list[int], name: str, final_activation: bool = True) -> "MLP":
        layers = [_dense(rng, a, b, f"{name}.{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        return cls(layers, final_activation)

    def __call__(self, x: DiffMatrix) -> DiffMatrix:
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            x = affine(x, w, b)
            if i < last or self.final_activation:
                x = ad.tanh(x)
        return x

    def parameters(self) -> list[DiffMatrix]:
        return [m for layer in self.layers for m in layer]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]


@dataclass
class MoEParams:
    experts: list[MLP]
    gate_w: DiffMatrix
    gate_b: DiffMatrix
    head: MLP = field(repr=False)

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, n_classes: int, n_experts: int = 8,
             expert_sizes: tuple[int, ...] = (32, 32), head_sizes: tuple[int, ...] = (32, 16)):
        if n_experts < 1:
            raise ContractError("need at least one expert")
        if n_classes < 2:
            raise ContractError("need at least two classes")
        experts = [MLP.init(rng, [in_dim, *expert_sizes], f"expert{i}") for i in range(n_experts)]
        gate_w, gate_b = _dense(rng, in_dim, n_experts, "gate")
        head = MLP.init(rng, [expert_sizes[-1], *head_sizes, n_classes], "head", final_activation=False)
        return cls(experts, gate_w, gate_b, head)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def parameters(self) -> list[DiffMatrix]:
        out = [p for e in self.experts for p in e.parameters()]
        out += [self.gate_w, self.gate_b]
        out += self.head.parameters()
        return out


def gate(z, params: MoEParams) -> DiffMatrix:
    """Softmax gate: B x in_dim -> B x N_E, rows sum to 1."""
    z = ad.as_diff(z)
    return ad.softmax_rows(affine(z, params.gate_w, params.gate_b))


def moe_forward(z, params: MoEParams) -> DiffMatrix:
    """Gate-weighted sum of every expert's output."""
    z = ad.as_diff(z)
    if z.shape[1] != params.gate_w.shape[0]:
        raise DimensionError(f"moe_forward: input width {z.shape[1]}, expected {params.gate_w.shape[0]}")
    if params.n_experts == 1:
        return params.experts[0](z)
    weights = gate(z, params)
    width = params.experts[0].out_dim
    spread = ad.ones(1, width)
    total = None
    for i, expert in enumerate(params.experts):
        g_i = ad.matmul(ad.slice_cols(weights, i, i + 1), spread)
        term = ad.hadamard(g_i, expert(z))
        total = term if total is None else total + term
    return total


def classify(z_moe, params: MoEParams) -> DiffMatrix:
    """Class probabilities, B x C."""
    return ad.softmax_rows(params.head(ad.as_diff(z_moe)))


def cross_entropy(probs, labels, class_weights=None, floor: float = 1e-12) -> DiffMatrix:
    """Mean negative log-probability of the true class.

    With ``class_weights`` (one per class) the mean is weighted:
    sum_i w[y_i] * -log p_i[y_i] / sum_i w[y_i].
    """
    probs = ad.as_diff(probs)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, c = probs.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"cross_entropy: label out of range for {c} classes")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    if class_weights is None:
        weights = np.full(n, 1.0 / n)
    else:
        w = np.asarray(class_weights, dtype=np.float64)[labels]
        weights = w / w.sum()
    picked = ad.row_sum(ad.hadamard(ad.const(onehot), probs))
    nll = -ad.log(picked, floor=floor)
    return ad.matmul(ad.const(weights[None, :]), nll)


def inverse_frequency_weights(labels, n_classes: int) -> np.ndarray:
    """w_c = N / (C * n_c); classes absent from ``labels`` get weight 0."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    n = counts.sum()
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, n / (n_classes * counts), 0.0)
    return w
