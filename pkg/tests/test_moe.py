import math

import numpy as np
import pytest

from segfusion import autodiff as ad
from segfusion.errors import ContractError, DimensionError
from segfusion.moe import MLP, MoEParams, classify, cross_entropy, gate, inverse_frequency_weights, moe_forward

import oracles


def _moe(seed, in_dim=6, n_classes=3, n_experts=3):
    return MoEParams.init(np.random.default_rng(seed), in_dim, n_classes, n_experts, (5, 4), (4, 3))


def test_gate_zero_weights_uniform():
    p = _moe(0, n_experts=4)
    p.gate_w.values = np.zeros(p.gate_w.shape)
    out = gate(np.random.default_rng(1).normal(size=(3, 6)), p).values
    assert np.allclose(out, 0.25)


def test_gate_dominant_logit():
    p = _moe(0, n_experts=4)
    p.gate_w.values = np.zeros(p.gate_w.shape)
    p.gate_b.values = np.array([[0.0, 50.0, 0.0, 0.0]])
    assert gate(np.ones((1, 6)), p).values[0, 1] == pytest.approx(1.0, abs=1e-20)


def test_gate_default_width():
    p = MoEParams.init(np.random.default_rng(0), 12, 2)
    assert gate(np.ones((2, 12)), p).shape == (2, 8)


def test_gate_matches_loop():
    p = _moe(2)
    z = np.random.default_rng(3).normal(size=(4, 6))
    ref = np.array(oracles.gate(z, p.gate_w.values, p.gate_b.values))
    assert np.abs(gate(z, p).values - ref).max() <= 1e-12


def test_single_expert_bypasses_gate():
    p = _moe(4, n_experts=1)
    z = np.random.default_rng(5).normal(size=(3, 6))
    assert np.array_equal(moe_forward(z, p).values, p.experts[0](ad.const(z)).values)


def test_identical_experts_fixed_point():
    p = _moe(6)
    for e in p.experts[1:]:
        for (w, b), (w0, b0) in zip(e.layers, p.experts[0].layers):
            w.values, b.values = w0.values, b0.values
    z = np.random.default_rng(7).normal(size=(4, 6))
    assert np.allclose(moe_forward(z, p).values, p.experts[0](ad.const(z)).values, atol=1e-15)


def test_moe_matches_weighted_sum_loop():
    p = _moe(8)
    z = np.random.default_rng(9).normal(size=(4, 6))
    g = oracles.gate(z, p.gate_w.values, p.gate_b.values)
    outs = [e(ad.const(z)).values for e in p.experts]
    ref = np.array([[sum(g[i][e] * outs[e][i, c] for e in range(3)) for c in range(outs[0].shape[1])]
                    for i in range(4)])
    assert np.abs(moe_forward(z, p).values - ref).max() <= 1e-12


def test_moe_width_mismatch():
    with pytest.raises(DimensionError):
        moe_forward(np.ones((2, 5)), _moe(0))


def test_classifier_zero_final_layer_uniform():
    p = _moe(10, n_classes=4)
    w, b = p.head.layers[-1]
    w.values = np.zeros(w.shape)
    out = classify(np.random.default_rng(0).normal(size=(3, 4)), p).values
    assert np.allclose(out, 0.25)


@pytest.mark.parametrize("n_classes", [2, 5])
def test_classifier_shapes_and_normalisation(n_classes):
    p = _moe(11, n_classes=n_classes)
    rng = np.random.default_rng(12)
    for _ in range(100):
        probs = classify(moe_forward(rng.normal(size=(3, 6)) * 3, p), p).values
        assert probs.shape == (3, n_classes)
        assert np.abs(probs.sum(axis=1) - 1.0).max() <= 1e-9


def test_cross_entropy_hand_values():
    assert cross_entropy(np.eye(3), [0, 1, 2]).item() == 0.0
    assert cross_entropy(np.full((2, 4), 0.25), [1, 3]).item() == pytest.approx(math.log(4))


def test_cross_entropy_matches_loop():
    probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8], [0.3, 0.4, 0.3]])
    labels = [0, 2, 1]
    assert abs(cross_entropy(probs, labels).item() - oracles.cross_entropy(probs, labels)) <= 1e-12
    w = [0.5, 2.0, 1.0]
    assert abs(cross_entropy(probs, labels, w).item() - oracles.cross_entropy(probs, labels, w)) <= 1e-12


def test_cross_entropy_floor_and_range():
    assert cross_entropy(np.array([[1.0, 0.0]]), [1]).item() == pytest.approx(-math.log(1e-12))
    with pytest.raises(ContractError):
        cross_entropy(np.full((1, 2), 0.5), [2])


def test_inverse_frequency_weights():
    w = inverse_frequency_weights([0, 0, 0, 1], 3)
    # N / (C * n_c)
    assert w.tolist() == [4 / 9, 4 / 3, 0.0]


def test_mlp_parameters_and_width():
    mlp = MLP.init(np.random.default_rng(0), [3, 5, 2], "m")
    assert len(mlp.parameters()) == 4 and mlp.out_dim == 2
