"""Multimodal feature fusion for utterance-level emotion and sentiment
classification: per-modality embeddings, concatenation, MLP, ablations."""

from ._jit import USE_JIT
from .core import (
    DatasetManifest,
    LabelSpace,
    ManifestError,
    ModalityKind,
    Task,
    UtteranceRecord,
    label_space,
    validate_manifest,
)
from .encoders import CacheKey, Embedding, EmbeddingCache, EncoderSpec, encode, encode_split, stub_encode
from .fusion import FusionModel, MlpConfig, MultimodalVector, concat_fuse, mlp_forward, predict
from .training import TrainConfig, adamw_step, cross_entropy, evaluate, reproduction_preset, train

__version__ = "0.1.0"

__all__ = [
    "USE_JIT",
    "CacheKey",
    "DatasetManifest",
    "Embedding",
    "EmbeddingCache",
    "EncoderSpec",
    "FusionModel",
    "LabelSpace",
    "ManifestError",
    "MlpConfig",
    "ModalityKind",
    "MultimodalVector",
    "Task",
    "TrainConfig",
    "UtteranceRecord",
    "adamw_step",
    "concat_fuse",
    "cross_entropy",
    "encode",
    "encode_split",
    "evaluate",
    "label_space",
    "mlp_forward",
    "predict",
    "reproduction_preset",
    "stub_encode",
    "train",
    "validate_manifest",
]
