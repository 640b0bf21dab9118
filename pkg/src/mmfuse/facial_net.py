"""Face branch: speaker face track -> bidirectional LSTM -> additive
attention context vector -> linear classifier.

Finding the speaking face (active speaker detection, identity clustering,
matching against a character library) is an external stage. It reaches
this module as a face-track adapter returning per-frame face embeddings.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence
from urllib.parse import quote

import numpy as np

from . import kernels
from .core import ModalityKind, UtteranceRecord
from .encoders import (
    AdapterUnavailableError,
    DimensionMismatchError,
    Embedding,
    MissingResourceError,
    stub_encode,
)
from .formats import FormatError, atomic_write, pack_track, read_bytes, unpack_track
from .layers import Params, dropout_mask, glorot, softmax


class Provenance(str, Enum):
    ADAPTER = "adapter"
    STUB = "stub"
    EMPTY = "empty"


@dataclass(frozen=True, eq=False)
class FaceTrack:
    utterance_id: str
    face_frames: np.ndarray
    provenance: Provenance

    def __post_init__(self):
        frames = self.face_frames
        if isinstance(frames, (list, tuple)):
            dims = {np.shape(f) for f in frames}
            if len(dims) > 1:
                raise DimensionMismatchError(
                    f"{self.utterance_id}: face frames have mixed dims {sorted(d[0] for d in dims)}"
                )
            frames = np.array(frames, dtype=np.float64) if frames else np.zeros((0, 0))
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError(f"face_frames must be (K, D), got {frames.shape}")
        if not np.isfinite(frames).all():
            raise ValueError(f"{self.utterance_id}: non-finite face embedding")
        prov = Provenance(self.provenance)
        if frames.shape[0] == 0:
            prov = Provenance.EMPTY
        elif prov is Provenance.EMPTY:
            raise ValueError("provenance=empty requires zero frames")
        object.__setattr__(self, "face_frames", frames)
        object.__setattr__(self, "provenance", prov)

    @property
    def K(self) -> int:
        return self.face_frames.shape[0]

    @property
    def empty(self) -> bool:
        return self.K == 0


FaceTrackAdapter = Callable[[UtteranceRecord], Sequence]


class StubFaceTrackAdapter:
    """Fabricates ``k`` hash-derived frames of width ``dim`` per utterance."""

    provenance = Provenance.STUB

    def __init__(self, k: int = 5, dim: int = 512, producer_id: str = "stub-face-v1"):
        self.k = k
        self.dim = dim
        self.producer_id = producer_id

    def __call__(self, record: UtteranceRecord):
        base = f"{self.producer_id}\x00{record.video_ref}\x00".encode()
        return [stub_encode(base + i.to_bytes(4, "little"), self.dim) for i in range(self.k)]


class TrackFileAdapter:
    """Reads ``<root>/<utterance_id>.trk`` files deposited by an external tool."""

    provenance = Provenance.ADAPTER

    def __init__(self, root):
        self.root = Path(root)

    def path_for(self, utterance_id: str) -> Path:
        return self.root / f"{quote(utterance_id, safe='')}.trk"

    def __call__(self, record: UtteranceRecord):
        path = self.path_for(record.utterance_id)
        if not path.exists():
            raise AdapterUnavailableError(f"no face track file {path}")
        return read_track_file(path)[1]


def write_track_file(path, frames, modality: ModalityKind = ModalityKind.FACE, dim: int | None = None) -> None:
    atomic_write(path, pack_track(ModalityKind(modality).code, frames, dim=dim))


def read_track_file(path) -> tuple[ModalityKind, np.ndarray]:
    code, frames = unpack_track(read_bytes(path), source=path)
    return ModalityKind.from_code(code), frames


def acquire_face_track(
    record: UtteranceRecord, adapter: FaceTrackAdapter, dim: int | None = None, on_unavailable: str = "empty"
) -> FaceTrack:
    """Fetch the speaker's face sequence for one utterance.

    ``on_unavailable`` is ``"empty"`` (return an empty track) or ``"fail"``.
    """
    if record.video_ref is None:
        raise MissingResourceError(f"{record.utterance_id}: no video_ref for face track")
    provenance = getattr(adapter, "provenance", Provenance.ADAPTER)
    try:
        frames = adapter(record)
    except (AdapterUnavailableError, FormatError):
        if on_unavailable == "fail":
            raise
        return FaceTrack(record.utterance_id, np.zeros((0, dim or 0)), Provenance.EMPTY)
    if frames is None or len(frames) == 0:
        return FaceTrack(record.utterance_id, np.zeros((0, dim or 0)), Provenance.EMPTY)
    track = FaceTrack(record.utterance_id, list(frames) if not isinstance(frames, np.ndarray) else frames, provenance)
    if dim is not None and track.face_frames.shape[1] != dim:
        raise DimensionMismatchError(
            f"{record.utterance_id}: face frames have dim {track.face_frames.shape[1]}, expected {dim}"
        )
    return track


# ------------------------------------------------------------ model


@dataclass(frozen=True)
class FacialModelConfig:
    recurrent_hidden: int = 256
    attention_dim: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.recurrent_hidden <= 0 or self.attention_dim <= 0:
            raise ValueError("recurrent_hidden and attention_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def init_facial_params(cfg: FacialModelConfig, input_dim: int, n_labels: int, rng: np.random.Generator) -> Params:
    n = cfg.recurrent_hidden
    bound = 1.0 / math.sqrt(n)
    p: Params = {}
    for d in ("fwd", "bwd"):
        p[f"{d}.Wx"] = rng.uniform(-bound, bound, size=(input_dim, 4 * n))
        p[f"{d}.Wh"] = rng.uniform(-bound, bound, size=(n, 4 * n))
        b = np.zeros(4 * n)
        b[n : 2 * n] = 1.0  # forget gate
        p[f"{d}.b"] = b
    p["att.W"] = glorot(rng, 2 * n, cfg.attention_dim)
    p["att.b"] = np.zeros(cfg.attention_dim)
    p["att.v"] = rng.uniform(-bound, bound, size=cfg.attention_dim)
    p["fc.W"] = glorot(rng, 2 * n, n_labels)
    p["fc.b"] = np.zeros(n_labels)
    return p


def bilstm_attention_forward(frames: np.ndarray, cfg: FacialModelConfig, params: Params):
    """Returns ``(context, attn, cache)`` for a nonempty ``(K, D_f)`` track."""
    X = np.asarray(frames, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("cannot encode an empty face track")
    n = cfg.recurrent_hidden
    xp_f = X @ params["fwd.Wx"] + params["fwd.b"]
    hf, cf, gf = kernels.lstm_fwd(xp_f, params["fwd.Wh"])
    Xr = X[::-1]
    xp_b = Xr @ params["bwd.Wx"] + params["bwd.b"]
    hb_r, cb_r, gb_r = kernels.lstm_fwd(xp_b, params["bwd.Wh"])
    S = np.concatenate([hf, hb_r[::-1]], axis=1)
    U = np.tanh(S @ params["att.W"] + params["att.b"])
    scores = U @ params["att.v"]
    attn = softmax(scores)
    context = attn @ S
    cache = dict(X=X, Xr=Xr, hf=hf, cf=cf, gf=gf, hb_r=hb_r, cb_r=cb_r, gb_r=gb_r, S=S, U=U, attn=attn, n=n)
    return context, attn, cache


def bilstm_attention_backward(dcontext: np.ndarray, cache, params: Params) -> Params:
    S, U, attn, n = cache["S"], cache["U"], cache["attn"], cache["n"]
    grads: Params = {}
    dattn = S @ dcontext
    dS = np.outer(attn, dcontext)
    dscores = attn * (dattn - attn @ dattn)
    grads["att.v"] = U.T @ dscores
    dpre = np.outer(dscores, params["att.v"]) * (1.0 - U * U)
    grads["att.W"] = S.T @ dpre
    grads["att.b"] = dpre.sum(axis=0)
    dS += dpre @ params["att.W"].T
    dxp_f, grads["fwd.Wh"] = kernels.lstm_bwd(dS[:, :n], cache["hf"], cache["cf"], cache["gf"], params["fwd.Wh"])
    grads["fwd.Wx"] = cache["X"].T @ dxp_f
    grads["fwd.b"] = dxp_f.sum(axis=0)
    dhb_r = dS[::-1, n:]
    dxp_b, grads["bwd.Wh"] = kernels.lstm_bwd(dhb_r, cache["hb_r"], cache["cb_r"], cache["gb_r"], params["bwd.Wh"])
    grads["bwd.Wx"] = cache["Xr"].T @ dxp_b
    grads["bwd.b"] = dxp_b.sum(axis=0)
    return grads


def bilstm_attention_encode(track: FaceTrack, cfg: FacialModelConfig, params: Params, producer_id="facialnet-v1"):
    """Context vector (width ``2 * recurrent_hidden``) and attention weights."""
    if track.empty:
        raise ValueError(f"{track.utterance_id}: empty face track")
    context, attn, _ = bilstm_attention_forward(track.face_frames, cfg, params)
    return Embedding(ModalityKind.FACE, producer_id, context), attn


def face_embedding(track: FaceTrack, cfg: FacialModelConfig, params: Params, producer_id="facialnet-v1") -> Embedding:
    """Fusion-facing export: an empty track becomes a zero vector flagged missing."""
    if track.empty:
        return Embedding(ModalityKind.FACE, producer_id, np.zeros(2 * cfg.recurrent_hidden), missing=True)
    return bilstm_attention_encode(track, cfg, params, producer_id)[0]


def facial_classify(context: Embedding | np.ndarray, head_params: Params) -> np.ndarray:
    """Single affine map from the context vector to label logits."""
    vec = context.values.astype(np.float64) if isinstance(context, Embedding) else np.asarray(context, dtype=np.float64)
    if vec.shape[-1] != head_params["fc.W"].shape[0]:
        raise ValueError(f"context dim {vec.shape[-1]} != head input {head_params['fc.W'].shape[0]}")
    return vec @ head_params["fc.W"] + head_params["fc.b"]


class FacialModel:
    """BiLSTM-attention encoder plus linear head, trained per track
    (one label per utterance)."""

    kind = "facial_net"

    def __init__(self, cfg: FacialModelConfig, input_dim: int, n_labels: int, seed: int = 0, params=None):
        self.cfg = cfg
        self.input_dim = input_dim
        self.n_labels = n_labels
        if params is None:
            params = init_facial_params(cfg, input_dim, n_labels, np.random.default_rng(seed))
        self.params = params

    def config_dict(self) -> dict:
        return {"facial": asdict(self.cfg), "input_dim": self.input_dim, "n_labels": self.n_labels}

    @classmethod
    def from_config(cls, config: dict, params: Params) -> FacialModel:
        return cls(FacialModelConfig(**config["facial"]), config["input_dim"], config["n_labels"], params=params)

    def _context(self, track: FaceTrack):
        if track.empty:
            return np.zeros(2 * self.cfg.recurrent_hidden), None
        context, _, cache = bilstm_attention_forward(track.face_frames, self.cfg, self.params)
        return context, cache

    def logits(self, inputs: Sequence[FaceTrack]) -> np.ndarray:
        return np.array([facial_classify(self._context(t)[0], self.params) for t in inputs])

    def loss_and_grads(self, inputs, labels, rng=None):
        from .training import cross_entropy

        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        total = 0.0
        n = len(inputs)
        for track, y in zip(inputs, labels):
            context, cache = self._context(track)
            m = dropout_mask(rng, context.shape, self.cfg.dropout)
            ctx_d = context if m is None else context * m
            loss, dlogits = cross_entropy(facial_classify(ctx_d, self.params), int(y))
            total += loss
            dlogits = dlogits / n
            grads["fc.W"] += np.outer(ctx_d, dlogits)
            grads["fc.b"] += dlogits
            if cache is not None:
                dctx = dlogits @ self.params["fc.W"].T
                if m is not None:
                    dctx = dctx * m
                for k, v in bilstm_attention_backward(dctx, cache, self.params).items():
                    grads[k] += v
        return total / n, grads
