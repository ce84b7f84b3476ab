import json
import warnings
from dataclasses import replace

import numpy as np
import pytest

from segfusion.config import RUNGS, TrainConfig
from segfusion.corpus import SyntheticSpec, generate_synthetic
from segfusion.errors import ContractError
from segfusion.evaluation import (
    _combo_config,
    auc_binary,
    auc_macro_ovr,
    kfold_cv,
    loss_combinations,
    run_ablation,
    stratified_folds,
)
from segfusion.gradcheck import SMALL_MODEL

import oracles

TINY = TrainConfig(epochs=1, batch_size=4, folds=3, model=SMALL_MODEL)


def _docs(n=12, classes=2, seed=0):
    return generate_synthetic(SyntheticSpec(n_docs=n, n_classes=classes, segments=2, d_audio=6, d_text=5,
                                            latent_dim=3, seed=seed))


def test_auc_perfect_ranking():
    assert auc_binary([0.1, 0.2, 0.8, 0.9], [False, False, True, True]) == 1.0


def test_auc_chance_level():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(3), size=5000)
    labels = rng.integers(0, 3, size=5000)
    macro, _ = auc_macro_ovr(probs, labels)
    assert abs(macro - 0.5) <= 0.05


def test_auc_tie_matches_pair_count():
    scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.2]
    positive = [False, True, False, True, False, True]
    assert auc_binary(scores, positive) == oracles.auc_pairs(scores, positive)


def test_auc_random_matches_pair_count():
    rng = np.random.default_rng(1)
    for _ in range(20):
        scores = rng.integers(0, 5, size=15) / 4.0
        positive = rng.random(15) < 0.5
        if positive.all() or not positive.any():
            continue
        assert auc_binary(scores, positive) == pytest.approx(oracles.auc_pairs(scores, positive), abs=1e-15)


def test_auc_macro_skips_absent_class():
    probs = np.array([[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1]])
    macro, per_class = auc_macro_ovr(probs, [0, 1, 0], 3)
    assert per_class[2] is None and macro == 1.0


def test_auc_single_class_undefined():
    with pytest.raises(ContractError, match="undefined"):
        auc_macro_ovr(np.full((3, 2), 0.5), [1, 1, 1])


def test_folds_partition_corpus():
    labels = np.random.default_rng(2).integers(0, 3, size=37)
    folds = stratified_folds(labels, 5, seed=3)
    assert folds.shape == labels.shape
    assert set(folds.tolist()) == set(range(5))
    sizes = np.bincount(folds)
    assert sizes.sum() == 37 and sizes.max() - sizes.min() <= 1


def test_folds_are_stratified():
    labels = np.repeat([0, 1, 2], [50, 30, 20])
    labels = np.random.default_rng(4).permutation(labels)
    folds = stratified_folds(labels, 5, seed=0)
    for f in range(5):
        for c, total in zip(range(3), (50, 30, 20)):
            share = total / 5
            assert abs(np.sum((folds == f) & (labels == c)) - share) <= 1


def test_folds_warn_on_rare_class():
    with pytest.warns(RuntimeWarning):
        stratified_folds([0, 0, 0, 0, 1], 3)


def test_kfold_reports():
    docs = _docs()
    cv = kfold_cv(docs, TINY, 2)
    assert len(cv.folds) == 3
    ids = sorted(i for r in cv.folds for i in r.val_ids)
    assert ids == sorted(d.id for d in docs)
    rec = json.loads(cv.folds[0].to_json())
    assert {"traces", "val_auc", "config", "auc_method"} <= rec.keys()
    assert len(rec["traces"]["total"]) == 1


def test_leave_one_out_uses_pooled_auc():
    docs = _docs(n=6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        cv = kfold_cv(docs, replace(TINY, folds=6), 2)
    assert all(r.val_auc is None for r in cv.folds)
    assert cv.pooled_auc is not None and cv.mean_auc == cv.pooled_auc


def test_kfold_is_deterministic():
    docs = _docs()
    a = [r.to_json() for r in kfold_cv(docs, TINY, 2).folds]
    b = [r.to_json() for r in kfold_cv(docs, TINY, 2).folds]
    assert a == b


def test_parallel_folds_match_serial():
    docs = _docs()
    serial = [r.to_json() for r in kfold_cv(docs, TINY, 2).folds]
    parallel = [r.to_json() for r in kfold_cv(docs, TINY, 2, workers=2).folds]
    assert serial == parallel


def test_loss_combinations():
    combos = loss_combinations()
    assert combos == [("con",), ("cka",), ("mi",), ("con", "cka"), ("con", "mi"), ("cka", "mi"),
                      ("con", "cka", "mi")]
    cfg = _combo_config(TrainConfig(), ("cka",)).loss
    assert (cfg.lambda_con, cfg.lambda_cka, cfg.lambda_mi) == (0.0, 0.5, 0.0)


def test_ablation_tables():
    docs = _docs()
    result = run_ablation(docs, replace(TINY, folds=2), 2, task="t")
    assert list(result.rungs) == list(RUNGS)
    assert len(result.combos) == 7
    assert [r["term"] for r in result.loss_table()] == ["con", "cka", "mi"]
    rows = result.to_csv().strip().splitlines()
    assert len(rows) == 1 + 4 + 7 + 6
    assert "dual_contrastive_moe" in result.to_text()
