"""``mmfuse`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .core import ManifestError, ModalityKind, Task, label_space, load_manifest, parse_subset
from .encoders import (
    CacheCorruptError,
    DimensionMismatchError,
    EmbeddingCache,
    EncodeFailure,
    EncoderSpec,
    encode_split,
)
from .formats import FormatError
from .harness import (
    CacheMissError,
    HarnessError,
    assemble_split,
    build_run_config,
    coerce_setting,
    load_result,
    merge_results,
    probe_dims,
    read_config_file,
    render_csv,
    render_text,
    resolve_producers,
    run_ablation,
)
from .training import TrainingError, evaluate, load_model, save_model, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MANIFEST = 3
EXIT_ENCODE = 4
EXIT_CACHE = 5
EXIT_TRAIN = 6
EXIT_RESULT = 7
EXIT_CONFIG = 8

EXIT_CODES_HELP = """\
exit codes:
  0  success
  2  usage error (bad flag or flag value)
  3  manifest invalid (line-numbered diagnostics on stderr)
  4  encode failure rate above threshold
  5  embedding cache missing, corrupt or inconsistent
  6  training or evaluation error
  7  result file missing or corrupt
  8  config file invalid or required path missing
"""

logger = logging.getLogger("mmfuse")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _modality(value: str) -> str:
    try:
        return ModalityKind(value).value
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"unknown modality {value!r} (choose from {', '.join(m.value for m in ModalityKind)})"
        ) from None


def _modality_list(value: str) -> str:
    for part in value.replace("+", ",").split(","):
        if part.strip():
            _modality(part.strip())
    return value


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--task", choices=[t.value for t in Task], default=None)
    g.add_argument("--modalities", type=_modality_list, default=None, help="comma list, e.g. text,voice")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--manifest", default=None, help="manifest (.jsonl or .csv)")
    g.add_argument("--cache", default=None, help="embedding cache directory")
    g.add_argument("--out", default=None, help="output directory")
    g.add_argument("--config", default=None, help="flat key = value config file; flags override it")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--hidden-sizes", dest="hidden_sizes", default=None, help="e.g. 512 or 512,128")
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--producers", default=None, help="modality=producer_id,... (default: infer from cache)")
    p.add_argument("--l2-normalize", dest="l2_normalize", action="store_const", const=True, default=None)


def build_parser() -> argparse.ArgumentParser:
    parent = _global_flags()
    parser = argparse.ArgumentParser(
        prog="mmfuse",
        description="Multimodal feature-fusion experiments for emotion and sentiment classification.",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[parent],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    kw = dict(parents=[parent], epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)

    p = sub.add_parser("encode", help="populate the embedding cache for one split", **kw)
    p.add_argument("--modality", type=_modality, action="append", required=True)
    p.add_argument("--encoder", action="append", required=True, help="stub:DIM or external:PRODUCER:DIM (one per --modality)")
    p.add_argument("--split", choices=["train", "dev", "test", "all"], default="all")
    p.add_argument("--failure-threshold", type=float, default=0.05)
    p.add_argument("--on-unavailable", choices=["fail", "skip"], default="fail")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", help="train a fusion classifier on one modality subset", **kw)
    _train_flags(p)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split", **kw)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "dev", "test"], default="test")
    p.add_argument("--producers", default=None)

    p = sub.add_parser("ablate", help="train/test every modality subset and write reports", **kw)
    _train_flags(p)
    p.add_argument("--subsets", default=None, help="';'-separated subsets, e.g. 'text;voice;text+voice'")
    p.add_argument("--reference", choices=["paper"], default=None, help="attach published accuracies as labelled metadata")
    p.add_argument("--unimodal-path", dest="unimodal_path", choices=["shared", "native", "both"], default=None)
    p.add_argument("--tracks", default=None, help="per-frame track directory for native video/face heads")

    p = sub.add_parser("report", help="render ablation.json files as CSV and a text table", **kw)
    p.add_argument("results", nargs="+", help="ablation.json files or run directories")

    p = sub.add_parser("synth", help="generate a synthetic manifest and embedding cache", **kw)
    p.add_argument("--n-train", type=int, default=800)
    p.add_argument("--n-dev", type=int, default=200)
    p.add_argument("--n-test", type=int, default=400)
    p.add_argument("--dims", default="text=64,voice=64,face=32,video=64")
    p.add_argument("--informativeness", default="text=0.8,voice=0.5,face=0.3,video=0.4")
    p.add_argument("--noise-scale", type=float, default=0.5)
    p.add_argument("--frames-per-track", type=int, default=0)
    return parser


def _settings(args) -> dict:
    file_settings = {}
    if args.config:
        try:
            file_settings = read_config_file(args.config)
        except (OSError, ValueError) as exc:
            raise CliError(EXIT_CONFIG, f"config: {exc}") from None
    overrides = {}
    for key in (
        "task", "modalities", "seed", "manifest", "cache", "out", "batch_size", "max_epochs", "max_steps",
        "lr", "weight_decay", "hidden_sizes", "dropout", "producers", "l2_normalize", "subsets",
        "reference", "unimodal_path", "tracks",
    ):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = coerce_setting(key, value) if isinstance(value, str) else value
    return {**file_settings, **overrides}


def _require(settings, *keys):
    for key in keys:
        if settings.get(key) is None:
            raise CliError(EXIT_CONFIG, f"--{key} is required (flag or config file)")


def _load_manifest(path):
    try:
        return load_manifest(path)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"manifest {path} does not exist") from None
    except ManifestError as exc:
        raise CliError(EXIT_MANIFEST, str(exc)) from None


def cmd_encode(args) -> int:
    s = _settings(args)
    _require(s, "manifest", "cache")
    if len(args.encoder) != len(args.modality):
        raise CliError(EXIT_USAGE, "give one --encoder per --modality")
    manifest = _load_manifest(s["manifest"])
    try:
        specs = [EncoderSpec.parse(m, e) for m, e in zip(args.modality, args.encoder)]
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    cache = EmbeddingCache(s["cache"])
    splits = ["train", "dev", "test"] if args.split == "all" else [args.split]
    totals = {"encoded": 0, "skipped": 0, "failed": 0, "cache_hits": 0}
    for split in splits:
        try:
            report = encode_split(
                manifest, specs, split, cache, args.failure_threshold, args.on_unavailable, args.workers
            )
        except EncodeFailure as exc:
            print(json.dumps(exc.report.as_dict(), sort_keys=True))
            raise CliError(EXIT_ENCODE, str(exc)) from None
        except (CacheCorruptError, DimensionMismatchError) as exc:
            raise CliError(EXIT_CACHE, str(exc)) from None
        for k in totals:
            totals[k] += getattr(report, k)
        print(json.dumps(report.as_dict(), sort_keys=True))
    print(json.dumps({"split": "total", **totals}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    s = _settings(args)
    _require(s, "manifest", "cache", "out")
    cfg = build_run_config(s, {})
    manifest = _load_manifest(cfg.manifest)
    cache = EmbeddingCache(cfg.cache)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    from .fusion import FusionModel

    try:
        producers = resolve_producers(cache, cfg.modalities, cfg.producers)
        dims = probe_dims(cache, producers)
        kw = dict(task=cfg.task, max_missing_frac=cfg.max_missing_frac, l2_normalize=cfg.l2_normalize)
        tr = assemble_split(manifest, cache, producers, dims, cfg.modalities, "train", **kw)
        dev = assemble_split(manifest, cache, producers, dims, cfg.modalities, "dev", **kw)
    except (CacheMissError, CacheCorruptError) as exc:
        raise CliError(EXIT_CACHE, str(exc)) from None
    model = FusionModel(cfg.mlp_config(), dims, cfg.modalities, len(label_space(cfg.task)), cfg.seed, cfg.l2_normalize)
    try:
        result = train(model, (tr.inputs, tr.labels), (dev.inputs, dev.labels), cfg.train_config())
    except TrainingError as exc:
        raise CliError(EXIT_TRAIN, str(exc)) from None
    save_model(
        out / "model.ckpt",
        result.model,
        extra={"task": cfg.task.value, "producers": {m.value: p for m, p in producers.items()}},
    )
    with open(out / "history.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "epochs": len(result.history), "steps": result.steps}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    s = _settings(args)
    _require(s, "manifest", "cache")
    try:
        model, ckpt = load_model(args.checkpoint)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"checkpoint {args.checkpoint} does not exist") from None
    except (FormatError, ValueError) as exc:
        raise CliError(EXIT_TRAIN, str(exc)) from None
    if ckpt.kind != "fusion_mlp":
        raise CliError(EXIT_TRAIN, f"evaluate expects a fusion checkpoint, got {ckpt.kind}")
    task = Task(ckpt.extra.get("task", s.get("task", "emotion")))
    manifest = _load_manifest(s["manifest"])
    cache = EmbeddingCache(s["cache"])
    explicit = s.get("producers") or {ModalityKind(k): v for k, v in ckpt.extra.get("producers", {}).items()}
    try:
        producers = resolve_producers(cache, model.subset, explicit)
        data = assemble_split(manifest, cache, producers, model.dims, model.subset, args.split, task, l2_normalize=model.l2_normalize)
    except (CacheMissError, CacheCorruptError, DimensionMismatchError) as exc:
        raise CliError(EXIT_CACHE, str(exc)) from None
    if len(data.labels) == 0:
        raise CliError(EXIT_TRAIN, f"split {args.split} has no labelled records")
    report = evaluate(model, data.inputs, data.labels, n_skipped=data.n_unlabelled)
    text = json.dumps({"split": args.split, "task": task.value, **report.as_dict()}, sort_keys=True)
    print(text)
    if s.get("out"):
        Path(s["out"]).mkdir(parents=True, exist_ok=True)
        (Path(s["out"]) / f"eval-{args.split}.json").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_ablate(args) -> int:
    s = _settings(args)
    _require(s, "manifest", "cache", "out")
    try:
        cfg = build_run_config(s, {})
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    try:
        result = run_ablation(cfg)
    except FileNotFoundError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    except ManifestError as exc:
        raise CliError(EXIT_MANIFEST, str(exc)) from None
    except (CacheMissError, CacheCorruptError, DimensionMismatchError) as exc:
        raise CliError(EXIT_CACHE, str(exc)) from None
    except TrainingError as exc:
        raise CliError(EXIT_TRAIN, str(exc)) from None
    sys.stdout.write(render_text(result))
    return EXIT_OK


def cmd_report(args) -> int:
    s = _settings(args)
    results = []
    for path in args.results:
        try:
            results.append(load_result(path))
        except FileNotFoundError:
            raise CliError(EXIT_RESULT, f"result file {path} not found") from None
        except HarnessError as exc:
            raise CliError(EXIT_RESULT, str(exc)) from None
    try:
        merged = merge_results(results)
    except HarnessError as exc:
        raise CliError(EXIT_RESULT, str(exc)) from None
    csv_text, table = render_csv(merged), render_text(merged)
    if s.get("out"):
        out = Path(s["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(csv_text, encoding="utf-8")
        (out / "report.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(csv_text)
    sys.stdout.write("\n")
    sys.stdout.write(table)
    return EXIT_OK


def _kv_floats(text: str) -> dict:
    out = {}
    for item in text.split(","):
        if item.strip():
            k, _, v = item.partition("=")
            out[ModalityKind(k.strip())] = float(v)
    return out


def cmd_synth(args) -> int:
    from .synth import SynthConfig, generate

    s = _settings(args)
    _require(s, "out")
    try:
        dims = {k: int(v) for k, v in _kv_floats(args.dims).items()}
        info = _kv_floats(args.informativeness)
        if s.get("modalities"):
            keep = parse_subset(",".join(m.value for m in s["modalities"]))
            info = {m: v for m, v in info.items() if m in keep}
        cfg = SynthConfig(
            n_per_split={"train": args.n_train, "dev": args.n_dev, "test": args.n_test},
            task=s.get("task", Task.EMOTION),
            dims=dims,
            informativeness=info,
            noise_scale=args.noise_scale,
            seed=s.get("seed", 0),
            frames_per_track=args.frames_per_track,
        )
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    data = generate(cfg, s["out"])
    print(json.dumps({"manifest": str(data.root / "manifest.jsonl"), "cache": str(data.cache.root), "records": len(data.manifest)}))
    return EXIT_OK


COMMANDS = {
    "encode": cmd_encode,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"mmfuse {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
