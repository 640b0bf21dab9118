"""Domain types shared by every stage: label spaces, modalities, utterance
records and manifest ingestion (JSON-lines or CSV)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable

EMOTION_LABELS = ("anger", "disgust", "fear", "joy", "neutral", "sadness", "surprise")
SENTIMENT_LABELS = ("negative", "neutral", "positive")

SPLITS = ("train", "dev", "test")

RECORD_FIELDS = (
    "utterance_id",
    "dialogue_id",
    "speaker",
    "text",
    "audio_ref",
    "video_ref",
    "emotion_label",
    "sentiment_label",
    "split",
)


class Task(str, Enum):
    EMOTION = "emotion"
    SENTIMENT = "sentiment"


class ModalityKind(str, Enum):
    """The four input channels. Declaration order is the concatenation order."""

    TEXT = "text"
    VOICE = "voice"
    FACE = "face"
    VIDEO = "video"

    @property
    def code(self) -> int:
        return MODALITY_ORDER.index(self)

    @classmethod
    def from_code(cls, code: int) -> ModalityKind:
        if not 0 <= code < len(MODALITY_ORDER):
            raise ValueError(f"unknown modality code {code}")
        return MODALITY_ORDER[code]


MODALITY_ORDER = tuple(ModalityKind)


def canonical_order(modalities: Iterable[ModalityKind | str]) -> list[ModalityKind]:
    """Deduplicate and sort modalities into text < voice < face < video."""
    kinds = {ModalityKind(m) for m in modalities}
    return [m for m in MODALITY_ORDER if m in kinds]


def subset_name(modalities: Iterable[ModalityKind | str]) -> str:
    return "+".join(m.value for m in canonical_order(modalities))


def parse_subset(text: str) -> list[ModalityKind]:
    parts = [p.strip() for p in text.replace(",", "+").split("+") if p.strip()]
    if not parts:
        raise ValueError("empty modality subset")
    return canonical_order(parts)


@dataclass(frozen=True)
class LabelSpace:
    task: Task
    labels: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, name: str) -> int:
        try:
            return self.labels.index(name)
        except ValueError:
            raise KeyError(f"{name!r} is not a {self.task.value} label") from None

    def name(self, index: int) -> str:
        if not 0 <= index < len(self.labels):
            raise IndexError(f"label index {index} out of range for {self.task.value}")
        return self.labels[index]

    def one_hot(self, index: int) -> list[int]:
        self.name(index)
        return [int(i == index) for i in range(len(self.labels))]


_LABEL_SPACES = {
    Task.EMOTION: LabelSpace(Task.EMOTION, EMOTION_LABELS),
    Task.SENTIMENT: LabelSpace(Task.SENTIMENT, SENTIMENT_LABELS),
}


def label_space(task: Task | str) -> LabelSpace:
    """Fixed label space for a task; labels are in alphabetical order."""
    return _LABEL_SPACES[Task(task)]


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    dialogue_id: str
    speaker: str
    text: str
    audio_ref: str | None
    video_ref: str | None
    emotion_label: int | None
    sentiment_label: int | None
    split: str

    def label(self, task: Task | str) -> int | None:
        return self.emotion_label if Task(task) is Task.EMOTION else self.sentiment_label

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[UtteranceRecord, ...]
    source_name: str = "manifest"
    label_spaces: tuple[LabelSpace, LabelSpace] = field(
        default=(_LABEL_SPACES[Task.EMOTION], _LABEL_SPACES[Task.SENTIMENT])
    )

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[UtteranceRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return sorted((r for r in self.records if r.split == name), key=lambda r: r.utterance_id)

    def by_id(self) -> dict[str, UtteranceRecord]:
        return {r.utterance_id: r for r in self.records}

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)


@dataclass(frozen=True)
class ManifestIssue:
    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


class ManifestError(ValueError):
    """Raised with every problem found in a manifest, each tied to a line number."""

    def __init__(self, issues: list[ManifestIssue]):
        self.issues = issues
        super().__init__("invalid manifest:\n" + "\n".join(f"  {i}" for i in issues))


def _check_label(value, space: LabelSpace, column: str, by_name: bool):
    if value is None or value == "":
        return None, None
    if by_name:
        try:
            return space.index(str(value).strip()), None
        except KeyError as exc:
            return None, f"{column}: {exc.args[0]}"
    if isinstance(value, bool) or not isinstance(value, int):
        return None, f"{column}: expected integer label index, got {value!r}"
    if not 0 <= value < len(space):
        return None, f"{column}: label out of range ({value} not in 0..{len(space) - 1})"
    return value, None


def _build_record(raw: dict, line: int, by_name: bool, issues: list[ManifestIssue]):
    missing = [f for f in RECORD_FIELDS if f not in raw]
    if missing:
        issues.append(ManifestIssue(line, f"missing required field(s): {', '.join(missing)}"))
        return None
    errors = []
    for name in ("utterance_id", "dialogue_id", "speaker", "text"):
        if not isinstance(raw[name], str):
            errors.append(f"{name}: expected string")
    if isinstance(raw["utterance_id"], str) and not raw["utterance_id"]:
        errors.append("utterance_id: must be nonempty")
    refs = {}
    for name in ("audio_ref", "video_ref"):
        value = raw[name]
        if value == "" and by_name:
            value = None
        if value is not None and not isinstance(value, str):
            errors.append(f"{name}: expected path string or null")
        refs[name] = value
    emotion, err = _check_label(raw["emotion_label"], label_space(Task.EMOTION), "emotion_label", by_name)
    if err:
        errors.append(err)
    sentiment, err = _check_label(
        raw["sentiment_label"], label_space(Task.SENTIMENT), "sentiment_label", by_name
    )
    if err:
        errors.append(err)
    if raw["split"] not in SPLITS:
        errors.append(f"unknown split {raw['split']!r}")
    if errors:
        issues.extend(ManifestIssue(line, e) for e in errors)
        return None
    return UtteranceRecord(
        utterance_id=raw["utterance_id"],
        dialogue_id=raw["dialogue_id"],
        speaker=raw["speaker"],
        text=raw["text"],
        audio_ref=refs["audio_ref"],
        video_ref=refs["video_ref"],
        emotion_label=emotion,
        sentiment_label=sentiment,
        split=raw["split"],
    )


def _looks_like_csv(raw: str) -> bool:
    first = raw.lstrip("﻿").split("\n", 1)[0].strip()
    return first.startswith("utterance_id,")


def validate_manifest(raw: str | bytes, source_name: str = "manifest") -> DatasetManifest:
    """Parse and validate manifest content.

    JSON-lines input carries label *indices*; CSV input (detected by its
    header row) carries label *names*. All problems are collected and raised
    together as a :class:`ManifestError`.
    """
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    issues: list[ManifestIssue] = []
    parsed: list[tuple[int, dict, bool]] = []
    if _looks_like_csv(raw):
        reader = csv.DictReader(io.StringIO(raw.lstrip("﻿")))
        header = tuple(reader.fieldnames or ())
        if header != RECORD_FIELDS:
            raise ManifestError([ManifestIssue(1, f"CSV header must be {','.join(RECORD_FIELDS)}")])
        for row in reader:
            parsed.append((reader.line_num, dict(row), True))
    else:
        for lineno, line in enumerate(raw.split("\n"), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                issues.append(ManifestIssue(lineno, f"not valid JSON ({exc.msg})"))
                continue
            if not isinstance(obj, dict):
                issues.append(ManifestIssue(lineno, "expected a JSON object"))
                continue
            parsed.append((lineno, obj, False))

    records: list[UtteranceRecord] = []
    seen: dict[str, int] = {}
    for lineno, obj, by_name in parsed:
        rec = _build_record(obj, lineno, by_name, issues)
        if rec is None:
            continue
        if rec.utterance_id in seen:
            issues.append(
                ManifestIssue(
                    lineno,
                    f"duplicate utterance_id {rec.utterance_id!r} (first seen on line {seen[rec.utterance_id]})",
                )
            )
            continue
        seen[rec.utterance_id] = lineno
        records.append(rec)
    if issues:
        raise ManifestError(issues)
    return DatasetManifest(records=tuple(records), source_name=source_name)


def load_manifest(path) -> DatasetManifest:
    with open(path, encoding="utf-8") as fh:
        return validate_manifest(fh.read(), source_name=str(path))


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(manifest.to_jsonl())
