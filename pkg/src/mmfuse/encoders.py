"""Per-modality encoders and the on-disk embedding cache.

Pretrained producers (text and speech transformers, face embedders) run
outside this package. They either register a Python callable with
:func:`register_adapter` or deposit ``EMB1`` files into the cache directory
ahead of time. Stub encoders derive vectors from a hash and exist so the
whole pipeline runs without any model weights.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable
from urllib.parse import quote, unquote

import numpy as np

from .core import DatasetManifest, ModalityKind, UtteranceRecord, canonical_order
from .formats import FormatError, atomic_write, pack_embedding, read_bytes, unpack_embedding

logger = logging.getLogger(__name__)

DEFAULT_DIMS = {
    ModalityKind.TEXT: 768,
    ModalityKind.VOICE: 768,
    ModalityKind.FACE: 512,
    ModalityKind.VIDEO: 1280,
}

INDEX_NAME = "index.tsv"
_SUFFIX = ".emb"


class EncoderError(RuntimeError):
    pass


class MissingResourceError(EncoderError):
    pass


class AdapterUnavailableError(EncoderError):
    pass


class DimensionMismatchError(EncoderError):
    """Always fatal: a producer disagrees with the configured width."""


class CacheCorruptError(EncoderError):
    def __init__(self, path, reason: str):
        self.path = Path(path)
        super().__init__(f"corrupted cache file {path}: {reason}")


class EncoderKind(str, Enum):
    EXTERNAL_ADAPTER = "external_adapter"
    STUB = "stub"


@dataclass(frozen=True, eq=False)
class Embedding:
    modality: ModalityKind
    producer_id: str
    values: np.ndarray
    missing: bool = False

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float32, copy=True)
        if vals.ndim != 1 or vals.shape[0] == 0:
            raise ValueError(f"embedding must be a nonempty vector, got shape {vals.shape}")
        if not np.isfinite(vals).all():
            raise ValueError(f"non-finite values in {self.modality.value} embedding from {self.producer_id}")
        vals.setflags(write=False)
        object.__setattr__(self, "modality", ModalityKind(self.modality))
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return (
            self.modality is other.modality
            and self.producer_id == other.producer_id
            and self.missing == other.missing
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class EncoderSpec:
    modality: ModalityKind
    producer_id: str
    dim: int
    kind: EncoderKind = EncoderKind.STUB

    def __post_init__(self):
        object.__setattr__(self, "modality", ModalityKind(self.modality))
        object.__setattr__(self, "kind", EncoderKind(self.kind))
        if self.dim <= 0:
            raise ValueError("encoder dim must be positive")
        if not self.producer_id:
            raise ValueError("producer_id must be nonempty")

    @classmethod
    def parse(cls, modality, text: str) -> EncoderSpec:
        """``stub:DIM`` or ``external:PRODUCER:DIM``."""
        parts = text.split(":")
        if parts[0] == "stub" and len(parts) == 2:
            return cls(ModalityKind(modality), "stub-v1", int(parts[1]), EncoderKind.STUB)
        if parts[0] == "external" and len(parts) == 3:
            return cls(ModalityKind(modality), parts[1], int(parts[2]), EncoderKind.EXTERNAL_ADAPTER)
        raise ValueError(f"bad encoder spec {text!r}; expected stub:DIM or external:PRODUCER:DIM")


@dataclass(frozen=True)
class CacheKey:
    utterance_id: str
    modality: ModalityKind
    producer_id: str

    def __post_init__(self):
        object.__setattr__(self, "modality", ModalityKind(self.modality))


def stub_encode(seed_material: bytes, dim: int) -> np.ndarray:
    """Deterministic pseudo-embedding from a hash.

    The SHAKE-256 digest of ``seed_material`` is extended to ``4 * dim``
    bytes. Byte block ``i`` (``digest[4i:4i+4]``) is read as a
    little-endian unsigned 32-bit integer ``u`` and mapped to
    ``2 * u / (2**32 - 1) - 1``, so entries lie in ``[-1, 1]``.
    """
    if dim <= 0:
        raise ValueError("dim must be positive")
    digest = hashlib.shake_256(bytes(seed_material)).digest(4 * dim)
    u = np.frombuffer(digest, dtype="<u4").astype(np.float64)
    return 2.0 * u / 4294967295.0 - 1.0


def resource_for(record: UtteranceRecord, modality: ModalityKind) -> str:
    modality = ModalityKind(modality)
    if modality is ModalityKind.TEXT:
        value = record.text
    elif modality is ModalityKind.VOICE:
        value = record.audio_ref
    else:
        value = record.video_ref
    if value is None:
        raise MissingResourceError(f"{record.utterance_id}: no resource for {modality.value}")
    return value


def stub_seed(record: UtteranceRecord, spec: EncoderSpec) -> bytes:
    return "\x00".join((spec.producer_id, spec.modality.value, resource_for(record, spec.modality))).encode()


Adapter = Callable[[UtteranceRecord, EncoderSpec], np.ndarray]
_ADAPTERS: dict[str, Adapter] = {}


def register_adapter(producer_id: str, fn: Adapter) -> None:
    """Register an in-process producer. It may return a vector or a
    ``(steps, dim)`` sequence, which is mean-pooled over steps."""
    _ADAPTERS[producer_id] = fn


def unregister_adapter(producer_id: str) -> None:
    _ADAPTERS.pop(producer_id, None)


def pool_sequence(out) -> np.ndarray:
    out = np.asarray(out, dtype=np.float64)
    if out.ndim == 2:
        return out.mean(axis=0)
    if out.ndim != 1:
        raise ValueError(f"adapter output must be 1-D or 2-D, got shape {out.shape}")
    return out


def encode(record: UtteranceRecord, spec: EncoderSpec, cache: EmbeddingCache | None = None) -> Embedding:
    resource = resource_for(record, spec.modality)
    if spec.kind is EncoderKind.STUB:
        values = stub_encode(stub_seed(record, spec), spec.dim)
    else:
        fn = _ADAPTERS.get(spec.producer_id)
        if fn is None:
            found = cache.get(CacheKey(record.utterance_id, spec.modality, spec.producer_id)) if cache else None
            if found is None:
                raise AdapterUnavailableError(
                    f"no adapter registered for {spec.producer_id!r} and no deposited embedding "
                    f"for {record.utterance_id} ({resource})"
                )
            values = found.values
        else:
            values = pool_sequence(fn(record, spec))
    if values.shape[0] != spec.dim:
        raise DimensionMismatchError(
            f"{spec.producer_id} produced dim {values.shape[0]} for {spec.modality.value}, expected {spec.dim}"
        )
    return Embedding(spec.modality, spec.producer_id, values)


class EmbeddingCache:
    """Directory of ``EMB1`` files: ``<root>/<producer>/<utterance>.<modality>.emb``.

    Producer and utterance ids are percent-encoded in file names. Writes
    are atomic per file, so concurrent readers never see partial data.
    """

    def __init__(self, root):
        self.root = Path(root)

    def _producer_dir(self, producer_id: str) -> Path:
        return self.root / quote(producer_id, safe="")

    def path_for(self, key: CacheKey) -> Path:
        return self._producer_dir(key.producer_id) / f"{quote(key.utterance_id, safe='')}.{key.modality.value}{_SUFFIX}"

    def put(self, key: CacheKey, emb: Embedding) -> None:
        if emb.modality is not key.modality:
            raise ValueError(f"key modality {key.modality.value} != embedding modality {emb.modality.value}")
        if not np.isfinite(emb.values).all():
            raise ValueError("refusing to cache non-finite embedding")
        atomic_write(self.path_for(key), pack_embedding(key.modality.code, emb.values))

    def get(self, key: CacheKey) -> Embedding | None:
        path = self.path_for(key)
        try:
            blob = read_bytes(path)
        except FileNotFoundError:
            return None
        try:
            code, values = unpack_embedding(blob, source=path)
        except FormatError as exc:
            raise CacheCorruptError(path, str(exc)) from None
        if code != key.modality.code:
            raise CacheCorruptError(path, f"modality code {code} does not match {key.modality.value}")
        try:
            return Embedding(key.modality, key.producer_id, values)
        except ValueError as exc:
            raise CacheCorruptError(path, str(exc)) from None

    def __contains__(self, key: CacheKey) -> bool:
        return self.path_for(key).exists()

    def producers(self) -> list[str]:
        if not self.root.exists():
            return []
        return sorted(unquote(p.name) for p in self.root.iterdir() if p.is_dir())

    def keys(self, producer_id: str) -> list[CacheKey]:
        """Keys for one producer, from the index file when present, else a scan."""
        pdir = self._producer_dir(producer_id)
        index = pdir / INDEX_NAME
        keys = []
        if index.exists():
            for line in index.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    uid, modality = line.split("\t")[:2]
                    keys.append(CacheKey(uid, ModalityKind(modality), producer_id))
            return keys
        if not pdir.exists():
            return []
        for path in sorted(pdir.glob(f"*{_SUFFIX}")):
            stem = path.name[: -len(_SUFFIX)]
            uid, _, modality = stem.rpartition(".")
            keys.append(CacheKey(unquote(uid), ModalityKind(modality), producer_id))
        return sorted(keys, key=lambda k: (k.utterance_id, k.modality.code))

    def write_index(self, producer_id: str) -> Path:
        pdir = self._producer_dir(producer_id)
        index = pdir / INDEX_NAME
        if index.exists():
            index.unlink()
        lines = "".join(f"{k.utterance_id}\t{k.modality.value}\n" for k in self.keys(producer_id))
        atomic_write(index, lines.encode("utf-8"))
        return index

    def modality_producers(self) -> dict[ModalityKind, list[str]]:
        """Which producers hold embeddings for each modality."""
        out: dict[ModalityKind, set[str]] = {}
        for producer in self.producers():
            for key in self.keys(producer):
                out.setdefault(key.modality, set()).add(producer)
        return {m: sorted(out[m]) for m in canonical_order(out)}


@dataclass
class EncodeReport:
    split: str
    encoded: int = 0
    skipped: int = 0
    failed: int = 0
    cache_hits: int = 0
    entries: list[tuple[str, str, str, str]] = field(default_factory=list)

    @property
    def attempted(self) -> int:
        return self.encoded + self.failed + self.cache_hits

    @property
    def failure_rate(self) -> float:
        return self.failed / self.attempted if self.attempted else 0.0

    def as_dict(self) -> dict:
        return {
            "split": self.split,
            "encoded": self.encoded,
            "skipped": self.skipped,
            "failed": self.failed,
            "cache_hits": self.cache_hits,
        }


class EncodeFailure(EncoderError):
    def __init__(self, report: EncodeReport, threshold: float):
        self.report = report
        super().__init__(
            f"encode failure rate {report.failure_rate:.3f} exceeds threshold {threshold:.3f} "
            f"({report.failed} failed)"
        )


def _encode_one(record, spec, cache, on_unavailable):
    key = CacheKey(record.utterance_id, spec.modality, spec.producer_id)
    if key in cache:
        cache.get(key)  # surfaces corruption
        return "hit", ""
    try:
        emb = encode(record, spec, cache)
    except MissingResourceError as exc:
        return "skipped", str(exc)
    except AdapterUnavailableError as exc:
        return ("skipped" if on_unavailable == "skip" else "failed"), str(exc)
    except (DimensionMismatchError, CacheCorruptError):
        raise
    except Exception as exc:  # adapter crash on one record
        return "failed", f"{type(exc).__name__}: {exc}"
    cache.put(key, emb)
    return "encoded", ""


def encode_split(
    manifest: DatasetManifest,
    specs: list[EncoderSpec],
    split: str,
    cache: EmbeddingCache,
    failure_threshold: float = 0.05,
    on_unavailable: str = "fail",
    workers: int = 1,
) -> EncodeReport:
    """Populate the cache for every (record in split, spec) pair.

    Missing resources count as skipped. Adapter failures count as failed
    unless ``on_unavailable="skip"``. Raises :class:`EncodeFailure` when the
    failed fraction of attempted pairs exceeds ``failure_threshold``.
    """
    if not specs:
        raise ValueError("at least one encoder spec is required")
    if on_unavailable not in ("fail", "skip"):
        raise ValueError("on_unavailable must be 'fail' or 'skip'")
    jobs = [(r, s) for r in manifest.split(split) for s in specs]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: _encode_one(*job, cache, on_unavailable), jobs))
    else:
        results = [_encode_one(r, s, cache, on_unavailable) for r, s in jobs]

    report = EncodeReport(split=split)
    counter = {"encoded": "encoded", "hit": "cache_hits", "skipped": "skipped", "failed": "failed"}
    for (record, spec), (status, detail) in zip(jobs, results):
        setattr(report, counter[status], getattr(report, counter[status]) + 1)
        report.entries.append((record.utterance_id, spec.modality.value, status, detail))
    report.entries.sort()
    for producer in sorted({s.producer_id for s in specs}):
        if cache._producer_dir(producer).exists():
            cache.write_index(producer)
    logger.info("encode %s: %s", split, report.as_dict())
    if report.failure_rate > failure_threshold:
        raise EncodeFailure(report, failure_threshold)
    return report
