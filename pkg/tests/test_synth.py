import math

import numpy as np
import pytest

from mmfuse.core import ModalityKind as M
from mmfuse.core import Task
from mmfuse.encoders import CacheKey
from mmfuse.facial_net import read_track_file
from mmfuse.synth import SynthConfig, generate, nearest_prototype_accuracy, oracle_accuracies, prototypes

SMALL = {"train": 40, "dev": 10, "test": 400}


def _oracle(tmp_path, seed=0, **kw):
    cfg = SynthConfig(n_per_split=SMALL, seed=seed, **kw)
    return oracle_accuracies(cfg, generate(cfg, tmp_path / f"s{seed}"))


def test_prototypes_are_scaled_orthogonal_axes():
    cfg = SynthConfig(prototype_scale=2.0)
    P = prototypes(cfg, M.FACE)
    assert P.shape == (7, 32)
    np.testing.assert_array_equal(P @ P.T, 4.0 * np.eye(7))


def test_strongest_modality_has_best_oracle(tmp_path):
    info = {M.TEXT: 0.9, M.VOICE: 0.3, M.FACE: 0.3, M.VIDEO: 0.3}
    acc = _oracle(tmp_path, informativeness=info)
    assert acc["text"] > max(acc["voice"], acc["face"], acc["video"])


def test_zero_informativeness_is_chance(tmp_path):
    acc = _oracle(tmp_path, informativeness={m: 0.0 for m in M})
    p = 1 / 7
    bound = 3 * math.sqrt(p * (1 - p) / SMALL["test"])
    for m in ("text", "voice", "face", "video"):
        assert abs(acc[m] - p) < bound, (m, acc[m])


def test_oracle_monotone_in_informativeness(tmp_path):
    info = {M.TEXT: 0.3, M.VOICE: 0.6, M.FACE: 0.9}
    for seed in range(5):
        acc = _oracle(tmp_path, seed, informativeness=info, dims={M.TEXT: 32, M.VOICE: 32, M.FACE: 32})
        # ties allowed within the 3 sigma noise of a 400-sample estimate
        slack = 3 * math.sqrt(0.25 / SMALL["test"])
        assert acc["text"] <= acc["voice"] + slack and acc["voice"] <= acc["face"] + slack
        assert acc["face"] > acc["text"]


def test_fused_oracle_not_worse_than_best_unimodal(tmp_path):
    for seed in range(5):
        acc = _oracle(tmp_path, seed)
        best = max(acc[m] for m in ("text", "voice", "face", "video"))
        assert acc["fused"] >= best - 0.01, (seed, acc)


def test_same_seed_byte_identical(tmp_path):
    cfg = SynthConfig(n_per_split={"train": 5, "dev": 2, "test": 3}, frames_per_track=2)
    a = generate(cfg, tmp_path / "a")
    generate(cfg, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) > 10
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    kind, frames = read_track_file(tmp_path / "a" / "tracks" / "face" / "train-00000.trk")
    assert kind is M.FACE and frames.shape == (2, 32)
    assert a.cache.get(CacheKey("test-00002", M.VIDEO, "synth-v1")).dim == 64


def test_different_seed_differs(tmp_path):
    a = generate(SynthConfig(n_per_split={"test": 3}, seed=0), tmp_path / "a")
    b = generate(SynthConfig(n_per_split={"test": 3}, seed=1), tmp_path / "b")
    assert not np.array_equal(a.embeddings["test-00000"][M.TEXT], b.embeddings["test-00000"][M.TEXT])


def test_sentiment_task_labels(tmp_path):
    d = generate(SynthConfig(n_per_split={"test": 30}, task=Task.SENTIMENT), tmp_path)
    labels = {r.sentiment_label for r in d.manifest.records}
    assert labels <= {0, 1, 2} and all(r.emotion_label is None for r in d.manifest.records)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(informativeness={M.TEXT: 1.5})
    with pytest.raises(ValueError):
        SynthConfig(dims={M.TEXT: 3}, informativeness={M.TEXT: 0.5})


def test_nearest_prototype_exact_points():
    P = np.eye(3)
    assert nearest_prototype_accuracy(P, [0, 1, 2], P) == 1.0
