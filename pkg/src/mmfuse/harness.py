"""Ablation runs over modality subsets and their reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_EVEN, Decimal
from itertools import combinations
from pathlib import Path
from urllib.parse import quote

import numpy as np

from .core import (
    MODALITY_ORDER,
    DatasetManifest,
    ModalityKind,
    Task,
    canonical_order,
    label_space,
    load_manifest,
    parse_subset,
    subset_name,
)
from .encoders import CacheKey, EmbeddingCache
from .facial_net import FaceTrack, FacialModel, FacialModelConfig, Provenance, read_track_file
from .fusion import FusionModel, MlpConfig
from .training import TrainConfig, evaluate, save_model, train
from .video_temporal import FrameFeatureSequence, TemporalEncoderConfig, VideoModel

logger = logging.getLogger(__name__)

REFERENCE_LABEL = "reference, not reproduced"

# Published accuracies (percent) on the full corpus with pretrained encoders.
# Shown only as labelled metadata next to locally measured rows.
PUBLISHED_ACCURACY = {
    Task.EMOTION: {
        "text": 64.34,
        "voice": 51.49,
        "face": 22.61,
        "video": 36.14,
        "voice+face+video": 48.16,
        "text+face+video": 65.98,
        "text+voice+face": 66.25,
        "text+voice+video": 66.29,
        "text+voice+face+video": 66.36,
    },
    Task.SENTIMENT: {
        "text": 69.21,
        "voice": 56.20,
        "face": 38.98,
        "video": 42.51,
        "voice+face+video": 49.58,
        "text+voice+video": 71.76,
        "text+face+video": 71.80,
        "text+voice+face": 71.84,
        "text+voice+face+video": 72.15,
    },
}


class HarnessError(RuntimeError):
    pass


class CacheMissError(HarnessError):
    pass


def reference_values(task: Task | str) -> dict[str, float]:
    """Published accuracies as fractions, keyed by canonical subset name."""
    return {k: float(Decimal(str(v)) / 100) for k, v in PUBLISHED_ACCURACY[Task(task)].items()}


def format_pct(accuracy: float) -> str:
    """Accuracy fraction as a percentage with two decimals.

    Rounding is half-to-even applied to the shortest decimal repr of the
    fraction (``repr(0.66365)`` is ``'0.66365'`` -> ``'66.36'``), so values
    do not drift with binary float error.
    """
    pct = Decimal(repr(float(accuracy))) * 100
    return str(pct.quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def default_subsets(modalities) -> list[list[ModalityKind]]:
    """Every single modality, every subset one short of the full set, and the full set."""
    mods = canonical_order(modalities)
    out = [[m] for m in mods]
    if len(mods) > 2:
        out += [list(c) for c in combinations(mods, len(mods) - 1)]
    if len(mods) > 1:
        out.append(mods)
    return out


# ------------------------------------------------------------ config


@dataclass
class RunConfig:
    task: Task = Task.EMOTION
    modalities: list[ModalityKind] = field(default_factory=lambda: list(MODALITY_ORDER))
    subsets: list[list[ModalityKind]] | None = None
    seed: int = 0
    manifest: Path | None = None
    cache: Path | None = None
    out: Path | None = None
    producers: dict[ModalityKind, str] = field(default_factory=dict)
    batch_size: int = 16
    max_epochs: int = 5
    max_steps: int | None = None
    lr: float = 1e-3
    weight_decay: float = 0.01
    hidden_sizes: tuple[int, ...] = (512,)
    dropout: float = 0.2
    l2_normalize: bool = False
    reference: str | None = None
    unimodal_path: str = "shared"
    tracks: Path | None = None
    max_missing_frac: float = 0.05
    video_hidden: int = 1280
    video_heads: int = 8
    video_layers: int = 2
    video_window: int = 8
    facial_hidden: int = 256
    facial_attention: int = 128

    def __post_init__(self):
        self.task = Task(self.task)
        self.modalities = canonical_order(self.modalities)
        if not self.modalities:
            raise ValueError("at least one modality is required")
        if self.unimodal_path not in ("shared", "native", "both"):
            raise ValueError("unimodal_path must be shared, native or both")
        if self.reference not in (None, "paper"):
            raise ValueError("reference must be 'paper' or unset")

    def run_subsets(self) -> list[list[ModalityKind]]:
        subsets = self.subsets if self.subsets else default_subsets(self.modalities)
        names = [subset_name(s) for s in subsets]
        if len(set(names)) != len(names):
            raise ValueError("modality subsets must be unique")
        return [canonical_order(s) for s in subsets]

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            max_steps=self.max_steps,
            lr=self.lr,
            weight_decay=self.weight_decay,
            seed=self.seed,
            task=self.task,
        )

    def mlp_config(self) -> MlpConfig:
        return MlpConfig(hidden_sizes=self.hidden_sizes, dropout=self.dropout)


_INT_KEYS = {
    "seed", "batch_size", "max_epochs", "max_steps", "video_hidden", "video_heads",
    "video_layers", "video_window", "facial_hidden", "facial_attention",
}
_FLOAT_KEYS = {"lr", "weight_decay", "dropout", "max_missing_frac"}
_PATH_KEYS = {"manifest", "cache", "out", "tracks"}


def coerce_setting(key: str, value):
    """Turn a config-file or CLI string into the RunConfig field type."""
    if value is None:
        return None
    if not isinstance(value, str):
        return value
    value = value.strip()
    if key in _INT_KEYS:
        return None if key == "max_steps" and value.lower() in ("", "none") else int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    if key in _PATH_KEYS:
        return Path(value)
    if key == "task":
        return Task(value)
    if key == "modalities":
        return parse_subset(value)
    if key == "subsets":
        return [parse_subset(s) for s in value.split(";") if s.strip()]
    if key == "hidden_sizes":
        return tuple(int(h) for h in value.replace(" ", "").split(",") if h)
    if key == "l2_normalize":
        return value.lower() in ("1", "true", "yes", "on")
    if key == "producers":
        out = {}
        for item in value.split(","):
            if item.strip():
                m, _, p = item.partition("=")
                out[ModalityKind(m.strip())] = p.strip()
        return out
    if key in ("reference", "unimodal_path"):
        return value or None
    raise KeyError(f"unknown config key {key!r}")


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    settings = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        try:
            settings[key] = coerce_setting(key, value)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return settings


def build_run_config(file_settings: dict, overrides: dict) -> RunConfig:
    merged = dict(file_settings)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**merged)


# ------------------------------------------------------------ data assembly


def resolve_producers(cache: EmbeddingCache, modalities, explicit=None) -> dict[ModalityKind, str]:
    explicit = dict(explicit or {})
    found = cache.modality_producers()
    out = {}
    for m in canonical_order(modalities):
        if m in explicit:
            out[m] = explicit[m]
            continue
        candidates = found.get(m, [])
        if len(candidates) != 1:
            raise CacheMissError(
                f"cannot infer producer for {m.value}: cache holds {candidates or 'none'}; set producers=..."
            )
        out[m] = candidates[0]
    return out


def probe_dims(cache: EmbeddingCache, producers: dict[ModalityKind, str]) -> dict[ModalityKind, int]:
    dims = {}
    for m, producer in producers.items():
        for key in cache.keys(producer):
            if key.modality is m:
                emb = cache.get(key)
                if emb is not None:
                    dims[m] = emb.dim
                    break
        else:
            raise CacheMissError(f"no cached {m.value} embeddings from {producer}")
    return dims


@dataclass
class SplitData:
    inputs: np.ndarray
    labels: np.ndarray
    ids: list[str]
    n_unlabelled: int
    n_missing: int


def assemble_split(
    manifest: DatasetManifest,
    cache: EmbeddingCache,
    producers: dict[ModalityKind, str],
    dims: dict[ModalityKind, int],
    subset,
    split: str,
    task: Task,
    max_missing_frac: float = 0.05,
    l2_normalize: bool = False,
) -> SplitData:
    """Fused input matrix for one split; unlabelled records are skipped and
    missing embeddings are zero-filled up to ``max_missing_frac``."""
    from .fusion import concat_fuse

    subset = canonical_order(subset)
    rows, labels, ids = [], [], []
    unlabelled = missing = slots = 0
    for rec in manifest.split(split):
        y = rec.label(task)
        if y is None:
            unlabelled += 1
            continue
        embs = {}
        for m in subset:
            slots += 1
            emb = cache.get(CacheKey(rec.utterance_id, m, producers[m]))
            if emb is None:
                missing += 1
            embs[m] = emb
        rows.append(concat_fuse(embs, subset, dims, l2_normalize).values)
        labels.append(y)
        ids.append(rec.utterance_id)
    if slots and missing / slots > max_missing_frac:
        raise CacheMissError(
            f"{split}/{subset_name(subset)}: {missing} of {slots} embeddings missing "
            f"(threshold {max_missing_frac:.2%})"
        )
    width = sum(dims[m] for m in subset)
    X = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    return SplitData(X, np.array(labels, dtype=np.int64), ids, unlabelled, missing)


def load_native_split(manifest, tracks_root: Path, modality: ModalityKind, split: str, task: Task):
    """Per-utterance frame sequences for a native video or face head."""
    inputs, labels, skipped = [], [], 0
    for rec in manifest.split(split):
        y = rec.label(task)
        if y is None:
            skipped += 1
            continue
        path = tracks_root / modality.value / f"{quote(rec.utterance_id, safe='')}.trk"
        if not path.exists():
            raise CacheMissError(f"missing track file {path}")
        _, frames = read_track_file(path)
        if modality is ModalityKind.VIDEO:
            inputs.append(FrameFeatureSequence(rec.utterance_id, frames, np.ones(len(frames), dtype=bool)))
        else:
            inputs.append(FaceTrack(rec.utterance_id, frames, Provenance.ADAPTER))
        labels.append(y)
    return inputs, np.array(labels, dtype=np.int64), skipped


# ------------------------------------------------------------ ablation


@dataclass
class AblationRow:
    subset: str
    modalities: list[str]
    path: str
    accuracy: float | None
    n: int
    checkpoint: str | None
    status: str = "ok"
    error: str | None = None

    def as_dict(self) -> dict:
        d = {
            "subset": self.subset,
            "modalities": self.modalities,
            "path": self.path,
            "accuracy": self.accuracy,
            "n": self.n,
            "checkpoint": self.checkpoint,
            "status": self.status,
        }
        if self.error:
            d["error"] = self.error
        return d


@dataclass
class AblationResult:
    task: Task
    rows: list[AblationRow]
    settings: dict
    reference_values: dict[str, float] | None = None

    def sorted_rows(self) -> list[AblationRow]:
        ok = [r for r in self.rows if r.accuracy is not None]
        bad = [r for r in self.rows if r.accuracy is None]
        ok.sort(key=lambda r: (r.accuracy, len(r.modalities), r.subset, r.path))
        return ok + sorted(bad, key=lambda r: (r.subset, r.path))

    def as_dict(self) -> dict:
        d = {
            "task": self.task.value,
            "settings": self.settings,
            "rows": [r.as_dict() for r in self.sorted_rows()],
        }
        if self.reference_values is not None:
            d["reference"] = {"label": REFERENCE_LABEL, "accuracy": self.reference_values}
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> AblationResult:
        rows = [
            AblationRow(
                r["subset"], r["modalities"], r["path"], r["accuracy"], r["n"], r["checkpoint"], r["status"], r.get("error")
            )
            for r in d["rows"]
        ]
        ref = d.get("reference", {}).get("accuracy")
        return cls(Task(d["task"]), rows, d.get("settings", {}), ref)


def _row_key(subset, path):
    name = subset_name(subset)
    return name if path == "shared_mlp" else f"{name}[native]"


def _run_shared(cfg, manifest, cache, producers, dims, subset, out_dir):
    tcfg = cfg.train_config()
    kw = dict(task=cfg.task, max_missing_frac=cfg.max_missing_frac, l2_normalize=cfg.l2_normalize)
    tr = assemble_split(manifest, cache, producers, dims, subset, "train", **kw)
    dev = assemble_split(manifest, cache, producers, dims, subset, "dev", **kw)
    test = assemble_split(manifest, cache, producers, dims, subset, "test", **kw)
    if len(test.labels) == 0:
        raise HarnessError("test split has no labelled records")
    model = FusionModel(cfg.mlp_config(), dims, subset, len(label_space(cfg.task)), seed=cfg.seed, l2_normalize=cfg.l2_normalize)
    result = train(model, (tr.inputs, tr.labels), (dev.inputs, dev.labels), tcfg)
    report = evaluate(result.model, test.inputs, test.labels)
    return result, report, len(test.labels)


def _run_native(cfg, manifest, subset, out_dir):
    m = subset[0]
    if cfg.tracks is None:
        raise HarnessError("native heads need per-frame tracks (set tracks=DIR)")
    tr = load_native_split(manifest, cfg.tracks, m, "train", cfg.task)
    dev = load_native_split(manifest, cfg.tracks, m, "dev", cfg.task)
    test = load_native_split(manifest, cfg.tracks, m, "test", cfg.task)
    if not tr[0] or not test[0]:
        raise HarnessError(f"no labelled {m.value} tracks")
    n_labels = len(label_space(cfg.task))
    first = next(x for x in tr[0] if (x.face_frames if m is ModalityKind.FACE else x.frames).shape[0] > 0)
    in_dim = (first.face_frames if m is ModalityKind.FACE else first.frames).shape[1]
    if m is ModalityKind.VIDEO:
        tcfg = TemporalEncoderConfig(
            num_layers=cfg.video_layers, num_heads=cfg.video_heads, hidden=cfg.video_hidden, attention_window=cfg.video_window
        )
        model = VideoModel(tcfg, in_dim, n_labels, seed=cfg.seed)
    else:
        fcfg = FacialModelConfig(recurrent_hidden=cfg.facial_hidden, attention_dim=cfg.facial_attention)
        model = FacialModel(fcfg, in_dim, n_labels, seed=cfg.seed)
    result = train(model, tr[:2], dev[:2], cfg.train_config())
    report = evaluate(result.model, test[0], test[1])
    return result, report, len(test[1])


def run_ablation(cfg: RunConfig) -> AblationResult:
    """Train and test one classifier per modality subset; write
    ``ablation.json``, ``ablation.csv``, ``report.txt`` and per-row
    checkpoints/histories under ``cfg.out``."""
    if cfg.manifest is None or cfg.cache is None or cfg.out is None:
        raise HarnessError("manifest, cache and out are required")
    for p in (cfg.manifest, cfg.cache):
        if not Path(p).exists():
            raise FileNotFoundError(f"{p} does not exist")
    manifest = load_manifest(cfg.manifest)
    cache = EmbeddingCache(cfg.cache)
    out = Path(cfg.out)
    (out / "models").mkdir(parents=True, exist_ok=True)
    subsets = cfg.run_subsets()
    needed = canonical_order(m for s in subsets for m in s)
    producers = resolve_producers(cache, needed, cfg.producers)
    dims = probe_dims(cache, producers)

    plans = []
    for subset in subsets:
        native_ok = len(subset) == 1 and subset[0] in (ModalityKind.VIDEO, ModalityKind.FACE)
        if len(subset) == 1 and cfg.unimodal_path in ("native", "both") and native_ok:
            plans.append((subset, "native_head"))
            if cfg.unimodal_path == "both":
                plans.append((subset, "shared_mlp"))
        else:
            plans.append((subset, "shared_mlp"))

    rows = []
    for subset, path in plans:
        key = _row_key(subset, path)
        ckpt_rel = f"models/{key}.ckpt"
        try:
            if path == "shared_mlp":
                result, report, n = _run_shared(cfg, manifest, cache, producers, dims, subset, out)
            else:
                result, report, n = _run_native(cfg, manifest, subset, out)
        except (HarnessError, FileNotFoundError) as exc:
            logger.warning("subset %s failed: %s", key, exc)
            rows.append(AblationRow(subset_name(subset), [m.value for m in subset], path, None, 0, None, "failed", str(exc)))
            continue
        save_model(out / ckpt_rel, result.model, extra={"task": cfg.task.value, "unimodal_path": path})
        with open(out / "models" / f"{key}.history.jsonl", "w", encoding="utf-8") as fh:
            for rec in result.history:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        rows.append(AblationRow(subset_name(subset), [m.value for m in subset], path, report.accuracy, n, ckpt_rel))
        logger.info("%s: accuracy %.4f (n=%d)", key, report.accuracy, n)

    settings = {
        "seed": cfg.seed,
        "train": cfg.train_config().as_dict(),
        "mlp": {"hidden_sizes": list(cfg.hidden_sizes), "dropout": cfg.dropout, "nonlinearity": "relu"},
        "l2_normalize": cfg.l2_normalize,
        "unimodal_path": cfg.unimodal_path,
        "producers": {m.value: p for m, p in producers.items()},
        "dims": {m.value: d for m, d in dims.items()},
        "manifest_records": len(manifest),
    }
    ref = reference_values(cfg.task) if cfg.reference == "paper" else None
    result = AblationResult(cfg.task, rows, settings, ref)
    write_reports(result, out)
    return result


# ------------------------------------------------------------ reports


def render_csv(result: AblationResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["subset", "accuracy_pct", "n"])
    for row in result.sorted_rows():
        name = row.subset if row.path == "shared_mlp" else f"{row.subset}[native]"
        writer.writerow([name, format_pct(row.accuracy) if row.accuracy is not None else "failed", row.n])
    return buf.getvalue()


def render_text(result: AblationResult) -> str:
    rows = result.sorted_rows()
    names = [r.subset.replace("+", " + ") + (" [native head]" if r.path == "native_head" else "") for r in rows]
    width = max([len("Modalities"), *map(len, names)])
    has_ref = result.reference_values is not None
    header = f"{'Modalities':<{width}} | {'Accuracy (%)':>12} | {'n':>6}"
    if has_ref:
        header += f" | {'Reference (%)':>13}"
    lines = [f"Task: {result.task.value}", header, "-" * len(header)]
    for name, row in zip(names, rows):
        acc = format_pct(row.accuracy) if row.accuracy is not None else "failed"
        line = f"{name:<{width}} | {acc:>12} | {row.n:>6}"
        if has_ref:
            ref = result.reference_values.get(row.subset)
            line += f" | {format_pct(ref) if ref is not None else '-':>13}"
        lines.append(line)
    if has_ref:
        lines.append("")
        lines.append(f"Reference column: published full-corpus accuracies ({REFERENCE_LABEL}).")
    return "\n".join(lines) + "\n"


def write_reports(result: AblationResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(result.to_json(), encoding="utf-8")
    (out / "ablation.csv").write_text(render_csv(result), encoding="utf-8")
    (out / "report.txt").write_text(render_text(result), encoding="utf-8")


def load_result(path) -> AblationResult:
    path = Path(path)
    if path.is_dir():
        path = path / "ablation.json"
    try:
        return AblationResult.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise HarnessError(f"{path}: corrupt result file ({exc})") from None


def merge_results(results: list[AblationResult]) -> AblationResult:
    if not results:
        raise HarnessError("no result files")
    tasks = {r.task for r in results}
    if len(tasks) != 1:
        raise HarnessError("result files mix tasks")
    rows = [row for r in results for row in r.rows]
    ref = next((r.reference_values for r in results if r.reference_values is not None), None)
    return replace(results[0], rows=rows, reference_values=ref)
