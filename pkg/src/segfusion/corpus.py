"""
Corpora of precomputed segment embeddings.

On-disk format (``.jsonl``): line 1 is a manifest record, every following
line one document::

    {"record": "manifest", "task": ..., "n_classes": ..., ...}
    {"id": "doc0", "task": ..., "label": 1, "audio": [[...], ...], "text": [[...], ...]}

Floats are written with their shortest round-tripping repr, so save/load is
bit-exact. A ``.npz`` path selects a binary equivalent.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    CorpusDimensionError,
    CorpusError,
    CorpusParseError,
    CorpusValueError,
    LabelRangeError,
)


@dataclass
class Document:
    """Paired audio/text segment matrices (L x d_a, L x d_t) for one sample."""

    id: str
    audio: np.ndarray
    text: np.ndarray
    label: int
    task: str = "task"

    @property
    def n_segments(self) -> int:
        return self.audio.shape[0]


@dataclass
class CorpusManifest:
    task: str
    n_classes: int
    d_audio: int
    d_text: int
    n_docs: int
    class_histogram: list[int]
    seed: int | None = None
    probe_auc: float | None = None

    def to_text(self) -> str:
        return "\n".join(f"{k}: {v}" for k, v in asdict(self).items())

    @classmethod
    def from_documents(cls, docs: list[Document], n_classes: int, seed=None, task=None):
        if not docs:
            raise CorpusError("no documents")
        hist = np.bincount([d.label for d in docs], minlength=n_classes).tolist()
        return cls(
            task=task or docs[0].task,
            n_classes=n_classes,
            d_audio=int(docs[0].audio.shape[1]),
            d_text=int(docs[0].text.shape[1]),
            n_docs=len(docs),
            class_histogram=hist,
            seed=seed,
        )


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-signal corpus recipe.

    Each segment l of a document of class c shares a latent
    ``u_l = mu_c + xi_l`` (xi ~ N(0, I_k)) between modalities; the audio row
    is ``gain_audio * A_a u_l + noise * eps`` and the text row likewise with
    its own fixed projection. Class means sit ``separation`` apart in units
    of the unit within-class latent spread.
    """

    n_docs: int = 200
    n_classes: int = 2
    class_ratios: tuple[float, ...] = ()
    segments: int = 8
    d_audio: int = 32
    d_text: int = 16
    latent_dim: int = 4
    noise: float = 1.0
    gain_audio: float = 1.0
    gain_text: float = 1.0
    separation: float = 4.0
    seed: int = 0
    task: str = "synthetic"

    def ratios(self) -> np.ndarray:
        if not self.class_ratios:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        return np.asarray(self.class_ratios, dtype=np.float64)

    def validate(self) -> "SyntheticSpec":
        if self.n_docs < 1 or self.segments < 1:
            raise ConfigurationError("data.n_docs and data.segments must be positive")
        if self.n_classes < 2:
            raise ConfigurationError("data.n_classes must be at least 2")
        if not 1 <= self.latent_dim <= min(self.d_audio, self.d_text):
            raise ConfigurationError("data.latent_dim must lie in [1, min(d_audio, d_text)]")
        ratios = self.ratios()
        if ratios.shape != (self.n_classes,) or np.any(ratios < 0) or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-9):
            raise ConfigurationError("data.class_ratios must be n_classes non-negative values summing to 1")
        if self.noise < 0 or self.separation < 0:
            raise ConfigurationError("data.noise and data.separation must be non-negative")
        return self


def class_means(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    k, c = spec.latent_dim, spec.n_classes
    radius = spec.separation / math.sqrt(2.0)
    if c <= k:
        means = np.zeros((c, k))
        means[np.arange(c), np.arange(c)] = radius
        return means
    dirs = rng.normal(size=(c, k))
    return radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec) -> list[Document]:
    """Deterministic in ``spec.seed``; document i draws from seed (seed, i)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k = spec.latent_dim
    proj_a = rng.normal(0.0, 1.0 / math.sqrt(k), (spec.d_audio, k))
    proj_t = rng.normal(0.0, 1.0 / math.sqrt(k), (spec.d_text, k))
    means = class_means(spec, rng)
    labels = rng.choice(spec.n_classes, size=spec.n_docs, p=spec.ratios())

    docs = []
    for i, label in enumerate(labels):
        doc_rng = np.random.default_rng([spec.seed, i])
        latent = means[label] + doc_rng.normal(size=(spec.segments, k))
        audio = spec.gain_audio * latent @ proj_a.T + spec.noise * doc_rng.normal(size=(spec.segments, spec.d_audio))
        text = spec.gain_text * latent @ proj_t.T + spec.noise * doc_rng.normal(size=(spec.segments, spec.d_text))
        docs.append(Document(f"doc{i:05d}", audio, text, int(label), spec.task))
    return docs


def synthetic_corpus(spec: SyntheticSpec) -> tuple[list[Document], CorpusManifest]:
    docs = generate_synthetic(spec)
    return docs, CorpusManifest.from_documents(docs, spec.n_classes, seed=spec.seed, task=spec.task)


def probe_auc(docs: list[Document], n_classes: int, modality: str = "text", folds: int = 5, seed: int = 0) -> float:
    """Cross-validated AUC of a logistic regression on mean-pooled segments.

    A learnability check on the corpus that is independent of the model.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.metrics import roc_auc_score
    from sklearn.model_selection import StratifiedKFold, cross_val_predict

    x = np.stack([getattr(d, modality).mean(axis=0) for d in docs])
    y = np.array([d.label for d in docs])
    splits = min(folds, int(np.bincount(y).min()))
    cv = StratifiedKFold(n_splits=max(splits, 2), shuffle=True, random_state=seed)
    proba = cross_val_predict(LogisticRegression(max_iter=2000), x, y, cv=cv, method="predict_proba")
    if n_classes == 2:
        return float(roc_auc_score(y, proba[:, 1]))
    return float(roc_auc_score(y, proba, multi_class="ovr", average="macro", labels=np.arange(n_classes)))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_corpus(path, docs: list[Document], manifest: CorpusManifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".npz":
        offsets = np.cumsum([0] + [d.n_segments for d in docs])
        np.savez(
            path,
            manifest=np.array(json.dumps(asdict(manifest))),
            ids=np.array([d.id for d in docs]),
            tasks=np.array([d.task for d in docs]),
            labels=np.array([d.label for d in docs], dtype=np.int64),
            offsets=offsets,
            audio=np.vstack([d.audio for d in docs]),
            text=np.vstack([d.text for d in docs]),
        )
        return path
    with path.open("w") as fh:
        fh.write(json.dumps({"record": "manifest", **asdict(manifest)}) + "\n")
        for d in docs:
            rec = {"id": d.id, "task": d.task, "label": int(d.label),
                   "audio": d.audio.tolist(), "text": d.text.tolist()}
            fh.write(json.dumps(rec) + "\n")
    return path


def _matrix(value, doc_id: str, field_name: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise CorpusParseError(f"{field_name} is not a rectangular numeric array", doc_id) from None
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise CorpusDimensionError(f"{field_name} must be a non-empty L x d matrix, got shape {arr.shape}", doc_id)
    return arr


def _read_jsonl(path: Path):
    manifest = None
    docs = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(f"invalid JSON ({exc.msg})", f"{path}:{lineno}") from None
            if not isinstance(rec, dict):
                raise CorpusParseError("record is not an object", f"{path}:{lineno}")
            if rec.get("record") == "manifest":
                if docs or manifest is not None:
                    raise CorpusParseError("manifest must be the first record", f"{path}:{lineno}")
                rec = {k: v for k, v in rec.items() if k != "record"}
                try:
                    manifest = CorpusManifest(**rec)
                except TypeError as exc:
                    raise CorpusParseError(f"bad manifest: {exc}", f"{path}:{lineno}") from None
                continue
            missing = {"id", "label", "audio", "text"} - rec.keys()
            if missing:
                raise CorpusParseError(f"missing fields {sorted(missing)}", f"{path}:{lineno}")
            doc_id = str(rec["id"])
            label = rec["label"]
            if not isinstance(label, int) or isinstance(label, bool):
                raise CorpusParseError(f"label {label!r} is not an integer", doc_id)
            docs.append(Document(doc_id, _matrix(rec["audio"], doc_id, "audio"),
                                 _matrix(rec["text"], doc_id, "text"), label,
                                 str(rec.get("task", manifest.task if manifest else "task"))))
    return docs, manifest


def _read_npz(path: Path):
    try:
        with np.load(path, allow_pickle=False) as data:
            manifest = CorpusManifest(**json.loads(str(data["manifest"])))
            offsets = data["offsets"]
            audio, text = data["audio"], data["text"]
            docs = [
                Document(str(data["ids"][i]), audio[offsets[i]:offsets[i + 1]].copy(),
                         text[offsets[i]:offsets[i + 1]].copy(), int(data["labels"][i]), str(data["tasks"][i]))
                for i in range(len(offsets) - 1)
            ]
    except (KeyError, ValueError, OSError) as exc:
        raise CorpusParseError(f"unreadable npz corpus: {exc}", str(path)) from None
    return docs, manifest


def validate_documents(docs: list[Document], manifest: CorpusManifest | None) -> CorpusManifest:
    if not docs:
        raise CorpusError("no documents")
    n_classes = manifest.n_classes if manifest else max(d.label for d in docs) + 1
    d_a = manifest.d_audio if manifest else docs[0].audio.shape[1]
    d_t = manifest.d_text if manifest else docs[0].text.shape[1]
    seen = set()
    for d in docs:
        if d.id in seen:
            raise CorpusParseError("duplicate document id", d.id)
        seen.add(d.id)
        if d.audio.shape[1] != d_a or d.text.shape[1] != d_t:
            raise CorpusDimensionError(
                f"widths audio={d.audio.shape[1]} text={d.text.shape[1]}, corpus expects {d_a}/{d_t}", d.id)
        if d.audio.shape[0] != d.text.shape[0]:
            raise CorpusDimensionError(
                f"audio has {d.audio.shape[0]} segments but text has {d.text.shape[0]}", d.id)
        if not (0 <= d.label < n_classes):
            raise LabelRangeError(f"label {d.label} outside [0, {n_classes})", d.id)
        if not (np.isfinite(d.audio).all() and np.isfinite(d.text).all()):
            raise CorpusValueError("non-finite segment embedding", d.id)
    rebuilt = CorpusManifest.from_documents(
        docs, n_classes,
        seed=manifest.seed if manifest else None,
        task=manifest.task if manifest else None,
    )
    if manifest is not None:
        if manifest.n_docs != rebuilt.n_docs or list(manifest.class_histogram) != rebuilt.class_histogram:
            raise CorpusError("manifest document count or class histogram does not match the documents")
        rebuilt.probe_auc = manifest.probe_auc
    return rebuilt


def load_corpus(path) -> tuple[list[Document], CorpusManifest]:
    path = Path(path)
    if not path.is_file():
        raise CorpusError("corpus file not found", str(path))
    docs, manifest = _read_npz(path) if path.suffix == ".npz" else _read_jsonl(path)
    return docs, validate_documents(docs, manifest)


def corpus_checksum(docs: list[Document]) -> str:
    h = hashlib.sha256()
    for d in docs:
        h.update(d.id.encode())
        h.update(np.ascontiguousarray(d.audio).tobytes())
        h.update(np.ascontiguousarray(d.text).tobytes())
        h.update(str(d.label).encode())
    return h.hexdigest()
