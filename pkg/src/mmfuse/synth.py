"""Synthetic multimodal datasets with per-modality signal strength.

For class ``y`` a modality ``m`` with informativeness ``i`` emits::

    scale * (i * e[a_m(y)] + (1 - i) * e[a_m(r)]) + N(0, noise_scale^2)

where ``e[a_m(c)]`` is the unit axis the modality assigns to class ``c``
(distinct axes per class, chosen per modality) and ``r`` is a distractor
class drawn uniformly from *all* classes, independently per modality. With
``i = 0`` the vector carries no label information; with ``i = 1`` the
prototype is exact. Independent distractors make modalities complementary,
so concatenation accumulates evidence.

Outputs are an ordinary manifest and embedding cache; downstream code cannot
tell them from real data.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import SPLITS, DatasetManifest, ModalityKind, Task, UtteranceRecord, label_space, write_manifest
from .encoders import CacheKey, Embedding, EmbeddingCache
from .facial_net import write_track_file

PRODUCER_ID = "synth-v1"


def _default_dims():
    return {ModalityKind.TEXT: 64, ModalityKind.VOICE: 64, ModalityKind.FACE: 32, ModalityKind.VIDEO: 64}


def _default_info():
    return {ModalityKind.TEXT: 0.8, ModalityKind.VOICE: 0.5, ModalityKind.FACE: 0.3, ModalityKind.VIDEO: 0.4}


@dataclass
class SynthConfig:
    n_per_split: dict[str, int] = field(default_factory=lambda: {"train": 800, "dev": 200, "test": 400})
    task: Task = Task.EMOTION
    dims: dict[ModalityKind, int] = field(default_factory=_default_dims)
    informativeness: dict[ModalityKind, float] = field(default_factory=_default_info)
    noise_scale: float = 0.5
    seed: int = 0
    prototype_scale: float = 1.0
    producer_id: str = PRODUCER_ID
    frames_per_track: int = 0

    def __post_init__(self):
        self.task = Task(self.task)
        self.dims = {ModalityKind(k): int(v) for k, v in self.dims.items()}
        self.informativeness = {ModalityKind(k): float(v) for k, v in self.informativeness.items()}
        n_labels = len(label_space(self.task))
        for m, d in self.dims.items():
            if d < n_labels:
                raise ValueError(f"{m.value} dim {d} is smaller than the {n_labels} classes")
        for m, i in self.informativeness.items():
            if not 0.0 <= i <= 1.0:
                raise ValueError(f"informativeness for {m.value} must be in [0, 1], got {i}")
            if m not in self.dims:
                raise ValueError(f"no dim configured for {m.value}")
        if set(self.n_per_split) - set(SPLITS):
            raise ValueError(f"unknown split in n_per_split: {sorted(self.n_per_split)}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")

    @property
    def modalities(self) -> list[ModalityKind]:
        return [m for m in ModalityKind if m in self.informativeness]


def _key(*parts) -> int:
    h = hashlib.sha256("\x00".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def class_axes(cfg: SynthConfig, modality: ModalityKind) -> np.ndarray:
    """Axis index assigned to each class for one modality."""
    rng = np.random.default_rng(_key("axes", cfg.seed, modality.value))
    return rng.permutation(cfg.dims[modality])[: len(label_space(cfg.task))]


def prototypes(cfg: SynthConfig, modality: ModalityKind) -> np.ndarray:
    """``(n_classes, dim)`` matrix of scaled orthogonal class prototypes."""
    axes = class_axes(cfg, modality)
    P = np.zeros((len(axes), cfg.dims[modality]))
    P[np.arange(len(axes)), axes] = cfg.prototype_scale
    return P


def sample_record(cfg: SynthConfig, utterance_id: str, label: int) -> dict[ModalityKind, np.ndarray]:
    """Embeddings for one utterance; randomness keyed by (seed, utterance_id)."""
    n_labels = len(label_space(cfg.task))
    rng = np.random.default_rng(_key("record", cfg.seed, utterance_id))
    out = {}
    for m in cfg.modalities:
        i = cfg.informativeness[m]
        P = prototypes(cfg, m)
        r = int(rng.integers(n_labels))
        out[m] = i * P[label] + (1.0 - i) * P[r] + rng.normal(0.0, cfg.noise_scale, size=cfg.dims[m])
    return out


def _record(uid, split, task, label, i):
    return UtteranceRecord(
        utterance_id=uid,
        dialogue_id=f"{split}-d{i // 10:04d}",
        speaker="synthetic",
        text=f"synthetic utterance {uid}",
        audio_ref=f"synth://{uid}.wav",
        video_ref=f"synth://{uid}.mp4",
        emotion_label=label if task is Task.EMOTION else None,
        sentiment_label=label if task is Task.SENTIMENT else None,
        split=split,
    )


@dataclass
class SynthDataset:
    manifest: DatasetManifest
    cache: EmbeddingCache
    embeddings: dict[str, dict[ModalityKind, np.ndarray]]
    root: Path


def generate(cfg: SynthConfig, out_dir) -> SynthDataset:
    """Write ``manifest.jsonl`` and ``cache/`` (plus ``tracks/<modality>/``
    when ``frames_per_track > 0``) under ``out_dir``."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    cache = EmbeddingCache(root / "cache")
    n_labels = len(label_space(cfg.task))
    records = []
    embeddings = {}
    for split in SPLITS:
        n = cfg.n_per_split.get(split, 0)
        label_rng = np.random.default_rng(_key("labels", cfg.seed, split))
        labels = label_rng.integers(n_labels, size=n)
        for i, label in enumerate(labels):
            uid = f"{split}-{i:05d}"
            rec = _record(uid, split, cfg.task, int(label), i)
            records.append(rec)
            vecs = sample_record(cfg, uid, int(label))
            embeddings[uid] = vecs
            for m, v in vecs.items():
                cache.put(CacheKey(uid, m, cfg.producer_id), Embedding(m, cfg.producer_id, v))
            if cfg.frames_per_track > 0:
                frng = np.random.default_rng(_key("frames", cfg.seed, uid))
                for m in (ModalityKind.FACE, ModalityKind.VIDEO):
                    if m in vecs:
                        frames = vecs[m] + frng.normal(0.0, cfg.noise_scale, size=(cfg.frames_per_track, cfg.dims[m]))
                        write_track_file(root / "tracks" / m.value / f"{uid}.trk", frames, m)
    cache.write_index(cfg.producer_id)
    manifest = DatasetManifest(tuple(records), source_name=f"synth(seed={cfg.seed})")
    write_manifest(manifest, root / "manifest.jsonl")
    return SynthDataset(manifest, cache, embeddings, root)


def nearest_prototype_accuracy(X: np.ndarray, labels, P: np.ndarray) -> float:
    """Accuracy of assigning each row of ``X`` to the closest prototype row."""
    X = np.asarray(X, dtype=np.float64)
    d2 = ((X[:, None, :] - P[None, :, :]) ** 2).sum(axis=-1)
    return float((np.argmin(d2, axis=1) == np.asarray(labels)).mean())


def oracle_accuracies(cfg: SynthConfig, data: SynthDataset, split: str = "test") -> dict[str, float]:
    """Nearest-prototype accuracy per modality and on the concatenation."""
    recs = data.manifest.split(split)
    labels = [r.label(cfg.task) for r in recs]
    out = {}
    for m in cfg.modalities:
        X = np.array([data.embeddings[r.utterance_id][m] for r in recs])
        out[m.value] = nearest_prototype_accuracy(X, labels, prototypes(cfg, m))
    X = np.array([np.concatenate([data.embeddings[r.utterance_id][m] for m in cfg.modalities]) for r in recs])
    P = np.concatenate([prototypes(cfg, m) for m in cfg.modalities], axis=1)
    out["fused"] = nearest_prototype_accuracy(X, labels, P)
    return out
