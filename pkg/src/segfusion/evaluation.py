"""
Macro one-vs-rest AUC, stratified k-fold cross-validation, and the
architecture / auxiliary-loss ablation tables.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from .config import RUNGS, LossConfig, RunConfig, TrainConfig, dump_config
from .corpus import Document
from .errors import ContractError
from .model import predict_proba
from .training import train

AUC_METHOD = "macro one-vs-rest ROC AUC (Mann-Whitney, midrank ties)"


def auc_binary(scores, positive) -> float:
    """Mann-Whitney AUC of ``scores`` for the boolean mask ``positive``."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC undefined: need both positive and negative samples")
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_macro_ovr(probs, labels, n_classes: int | None = None) -> tuple[float, list[float | None]]:
    """Macro-averaged one-vs-rest AUC and the per-class values.

    Classes absent from ``labels`` get ``None`` and are left out of the mean.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ContractError(f"probs {probs.shape} and labels {labels.shape} do not align")
    n_classes = probs.shape[1] if n_classes is None else n_classes
    present = np.unique(labels)
    if present.size < 2:
        raise ContractError("AUC undefined: labels contain a single class")
    per_class: list[float | None] = []
    for c in range(n_classes):
        if c not in present:
            per_class.append(None)
        else:
            per_class.append(auc_binary(probs[:, c], labels == c))
    defined = [a for a in per_class if a is not None]
    return float(np.mean(defined)), per_class


def stratified_folds(labels, k: int, seed: int = 0) -> np.ndarray:
    """Fold id per sample.

    Members of each class are shuffled and dealt round-robin, continuing
    from where the previous class stopped, so every fold gets each class
    within one sample of its share and fold sizes differ by at most one.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if not 2 <= k <= n:
        raise ContractError(f"fold count {k} must lie in [2, {n}]")
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < k:
            warnings.warn(
                f"class {c} has {members.size} members for {k} folds; "
                "it cannot appear in every fold", RuntimeWarning, stacklevel=2)
        members = rng.permutation(members)
        folds[members] = (offset + np.arange(members.size)) % k
        offset += members.size
    return folds


@dataclass
class FoldReport:
    fold: int
    traces: dict[str, list]
    val_auc: float | None
    per_class_auc: list[float | None]
    n_train: int
    n_val: int
    val_ids: list[str]
    val_labels: list[int]
    val_probs: list[list[float]]
    config: str
    auc_method: str = AUC_METHOD

    def to_record(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_record())


@dataclass
class CVResult:
    folds: list[FoldReport]
    mean_auc: float
    std_auc: float
    pooled_auc: float | None
    n_classes: int

    def summary(self) -> dict:
        return {"mean_auc": self.mean_auc, "std_auc": self.std_auc, "pooled_auc": self.pooled_auc,
                "folds": len(self.folds), "auc_method": AUC_METHOD}


def _safe_auc(probs, labels, n_classes):
    try:
        return auc_macro_ovr(probs, labels, n_classes)
    except ContractError:
        return None, [None] * n_classes


def run_fold(docs: list[Document], folds: np.ndarray, fold: int, cfg: TrainConfig, n_classes: int) -> FoldReport:
    train_docs = [d for d, f in zip(docs, folds) if f != fold]
    val_docs = [d for d, f in zip(docs, folds) if f == fold]
    fold_cfg = replace(cfg, batch_size=min(cfg.batch_size, len(train_docs)))
    result = train(train_docs, fold_cfg, n_classes, seed=[cfg.seed, fold])
    probs = predict_proba(result.params, val_docs, chunk=max(cfg.batch_size, 2))
    labels = [d.label for d in val_docs]
    auc, per_class = _safe_auc(probs, labels, n_classes)
    return FoldReport(
        fold=fold,
        traces=result.traces,
        val_auc=auc,
        per_class_auc=per_class,
        n_train=len(train_docs),
        n_val=len(val_docs),
        val_ids=[d.id for d in val_docs],
        val_labels=labels,
        val_probs=probs.tolist(),
        config=dump_config(RunConfig(train=cfg)),
    )


def kfold_cv(docs: list[Document], cfg: TrainConfig, n_classes: int, workers: int | None = None) -> CVResult:
    """Stratified k-fold CV; each fold trains an independent model.

    Folds whose validation split lacks two classes report no AUC; the
    pooled AUC over all out-of-fold predictions is always computed and is
    the headline figure when no fold AUC is defined (e.g. leave-one-out).
    """
    cfg.validate()
    k = cfg.folds
    if k > len(docs):
        raise ContractError(f"{k} folds for {len(docs)} documents")
    labels = np.array([d.label for d in docs])
    folds = stratified_folds(labels, k, cfg.seed)
    workers = cfg.workers if workers is None else workers
    args = [(docs, folds, f, cfg, n_classes) for f in range(k)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run_fold, *zip(*args)))
    else:
        reports = [run_fold(*a) for a in args]

    pooled_probs = np.vstack([r.val_probs for r in reports])
    pooled_labels = np.concatenate([r.val_labels for r in reports])
    pooled, _ = _safe_auc(pooled_probs, pooled_labels, n_classes)
    fold_aucs = [r.val_auc for r in reports if r.val_auc is not None]
    if fold_aucs:
        mean, std = float(np.mean(fold_aucs)), float(np.std(fold_aucs))
    else:
        mean, std = pooled, 0.0
    return CVResult(reports, mean, std, pooled, n_classes)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

AUX_TERMS = ("con", "cka", "mi")


def loss_combinations() -> list[tuple[str, ...]]:
    """All non-empty subsets of the auxiliary terms, smallest first."""
    return [c for r in range(1, len(AUX_TERMS) + 1) for c in itertools.combinations(AUX_TERMS, r)]


def _combo_config(cfg: TrainConfig, combo: tuple[str, ...]) -> TrainConfig:
    defaults = LossConfig().weights()
    base = cfg.loss.weights()
    lam = {t: ((base[t] or defaults[t]) if t in combo else 0.0) for t in AUX_TERMS}
    loss = replace(cfg.loss, rung="dual_contrastive_moe", lambda_con=lam["con"],
                   lambda_cka=lam["cka"], lambda_mi=lam["mi"])
    return replace(cfg, loss=loss)


@dataclass
class AblationResult:
    task: str
    rungs: dict[str, dict] = field(default_factory=dict)
    combos: dict[str, dict] = field(default_factory=dict)

    def loss_table(self) -> list[dict]:
        """Per auxiliary term: best mean AUC with and without it."""
        rows = []
        for term in AUX_TERMS:
            with_t = [v["mean_auc"] for k, v in self.combos.items() if term in k.split("+")]
            without = [v["mean_auc"] for k, v in self.combos.items() if term not in k.split("+")]
            rows.append({"term": term, "without": max(without) if without else None,
                         "with": max(with_t) if with_t else None})
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["table", "task", "row", "mean_auc", "std_auc", "pooled_auc"])
        for rung, s in self.rungs.items():
            w.writerow(["architecture", self.task, rung, s["mean_auc"], s["std_auc"], s["pooled_auc"]])
        for combo, s in self.combos.items():
            w.writerow(["loss_combination", self.task, combo, s["mean_auc"], s["std_auc"], s["pooled_auc"]])
        for row in self.loss_table():
            w.writerow(["loss_ablation_without", self.task, row["term"], row["without"], "", ""])
            w.writerow(["loss_ablation_with", self.task, row["term"], row["with"], "", ""])
        return buf.getvalue()

    def to_text(self) -> str:
        def fmt(x):
            return "   n/a" if x is None else f"{100 * x:6.2f}"

        lines = [f"task: {self.task}   metric: {AUC_METHOD}, AUC (%)", "",
                 f"{'architecture':<24}{'mean':>8}{'std':>8}"]
        for rung, s in self.rungs.items():
            lines.append(f"{rung:<24}{fmt(s['mean_auc']):>8}{fmt(s['std_auc']):>8}")
        lines += ["", f"{'aux loss combination':<24}{'mean':>8}{'std':>8}"]
        for combo, s in self.combos.items():
            lines.append(f"{combo:<24}{fmt(s['mean_auc']):>8}{fmt(s['std_auc']):>8}")
        lines += ["", f"{'aux loss':<24}{'without':>8}{'with':>8}"]
        for row in self.loss_table():
            lines.append(f"{row['term']:<24}{fmt(row['without']):>8}{fmt(row['with']):>8}")
        return "\n".join(lines) + "\n"


def run_ablation(docs: list[Document], cfg: TrainConfig, n_classes: int, task: str = "task",
                 rungs=RUNGS, combos: bool = True, progress=None) -> AblationResult:
    """k-fold CV for each architecture rung and, on the full architecture,
    for every non-empty combination of auxiliary losses."""
    result = AblationResult(task)
    for rung in rungs:
        cv = kfold_cv(docs, cfg.with_rung(rung), n_classes)
        result.rungs[rung] = cv.summary()
        if progress:
            progress(f"{rung}: {cv.mean_auc:.4f}")
    if combos:
        for combo in loss_combinations():
            cv = kfold_cv(docs, _combo_config(cfg, combo), n_classes)
            name = "+".join(combo)
            result.combos[name] = cv.summary()
            if progress:
                progress(f"{name}: {cv.mean_auc:.4f}")
    return result
