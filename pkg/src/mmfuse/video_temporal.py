"""Video branch: sampled frames -> spatial features -> local-attention
transformer -> pooled clip vector -> classifier head.

The spatial extractor (a pretrained mobile CNN in practice) is an adapter:
any callable mapping one frame to a ``D_s`` vector. Frame decoding is also
delegated, to a reader callable returning the clip's frames.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .core import ModalityKind
from .encoders import Embedding, stub_encode
from .layers import (
    Params,
    dropout_mask,
    glorot,
    he,
    layer_norm_bwd,
    layer_norm_fwd,
    relu,
    sinusoidal_positions,
)

AttentionError = kernels.AttentionError
HEAD_HIDDEN = 512


class VideoReadError(RuntimeError):
    pass


class SpatialFeatureError(RuntimeError):
    pass


# ------------------------------------------------------------ frames


@dataclass(frozen=True)
class SamplingPolicy:
    max_frames: int = 32


def sample_indices(n_total: int, max_frames: int) -> list[int]:
    """Uniform, order-preserving frame choice: ``floor(i * n_total / max_frames)``
    for ``i < max_frames``; every frame when the clip is short enough."""
    if n_total <= 0:
        raise ValueError("clip has no frames")
    if max_frames < 1:
        raise ValueError("max_frames must be >= 1")
    if n_total <= max_frames:
        return list(range(n_total))
    return [(i * n_total) // max_frames for i in range(max_frames)]


def sample_frames(video_ref: str, reader: Callable[[str], Sequence], policy: SamplingPolicy = SamplingPolicy()):
    """Decode ``video_ref`` with ``reader`` and keep a uniform subset of frames."""
    try:
        frames = reader(video_ref)
    except Exception as exc:
        raise VideoReadError(f"{video_ref}: unreadable video ({exc})") from exc
    if frames is None or len(frames) == 0:
        raise VideoReadError(f"{video_ref}: video has zero frames")
    return [frames[i] for i in sample_indices(len(frames), policy.max_frames)]


@dataclass(frozen=True, eq=False)
class FrameFeatureSequence:
    utterance_id: str
    frames: np.ndarray
    frame_mask: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        mask = np.asarray(self.frame_mask, dtype=bool)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError(f"frames must be (T>=1, D), got {frames.shape}")
        if mask.shape != (frames.shape[0],):
            raise ValueError("frame_mask length must equal the number of frames")
        if not np.isfinite(frames[mask]).all():
            raise ValueError(f"{self.utterance_id}: non-finite values in valid frames")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "frame_mask", mask)

    @property
    def T(self) -> int:
        return self.frames.shape[0]


class StubSpatialAdapter:
    """Hash-derived frame features. Frames that are ``None`` or contain
    non-finite numbers are treated as corrupt."""

    def __init__(self, dim: int = 1280, producer_id: str = "stub-spatial-v1"):
        self.dim = dim
        self.producer_id = producer_id

    def __call__(self, frame) -> np.ndarray:
        if frame is None:
            raise SpatialFeatureError("corrupt frame")
        arr = np.ascontiguousarray(frame)
        if arr.dtype.kind == "f" and not np.isfinite(arr).all():
            raise SpatialFeatureError("corrupt frame")
        seed = self.producer_id.encode() + b"\x00" + str(arr.dtype).encode() + str(arr.shape).encode() + arr.tobytes()
        return stub_encode(seed, self.dim)


def spatial_features(frames, adapter, dim: int, utterance_id: str = "") -> FrameFeatureSequence:
    """Run the per-frame extractor; a failing frame is masked out."""
    if len(frames) == 0:
        raise SpatialFeatureError(f"{utterance_id}: no frames")
    rows = np.zeros((len(frames), dim))
    mask = np.zeros(len(frames), dtype=bool)
    for t, frame in enumerate(frames):
        try:
            vec = np.asarray(adapter(frame), dtype=np.float64)
        except Exception:
            continue
        if vec.shape != (dim,):
            raise SpatialFeatureError(f"{utterance_id}: extractor returned shape {vec.shape}, expected ({dim},)")
        if not np.isfinite(vec).all():
            continue
        rows[t] = vec
        mask[t] = True
    if not mask.any():
        raise SpatialFeatureError(f"{utterance_id}: every frame failed feature extraction")
    return FrameFeatureSequence(utterance_id, rows, mask)


# ------------------------------------------------------------ attention


def local_attention(queries, keys, values, window: int, mask=None):
    """Scaled dot-product attention restricted to ``|t - s| <= window`` and
    valid keys. Accepts ``(T, d)`` or per-head ``(H, T, d)`` inputs and
    returns ``(context, weights)`` with matching leading shape."""
    q = np.asarray(queries, dtype=np.float64)
    single = q.ndim == 2
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if single:
        q, k, v = q[None], k[None], v[None]
    if not (q.shape == k.shape and q.shape[:2] == v.shape[:2]):
        raise ValueError(f"shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    T = q.shape[1]
    mask = np.ones(T, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    ctx, weights = kernels.local_attention_fwd(q, k, v, window, mask)
    if single:
        return ctx[0], weights[0]
    return ctx, weights


def dense_attention(queries, keys, values, mask=None):
    """Unrestricted softmax attention over valid keys (reference path)."""
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    scores = q @ k.T / np.sqrt(q.shape[-1])
    if mask is not None:
        scores = np.where(np.asarray(mask, dtype=bool)[None, :], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v, w


# ------------------------------------------------------------ encoder


@dataclass(frozen=True)
class TemporalEncoderConfig:
    num_layers: int = 2
    num_heads: int = 8
    hidden: int = 1280
    attention_window: int = 8
    ffn_multiplier: int = 4
    dropout: float = 0.1
    position_encoding: bool = True

    def __post_init__(self):
        if self.hidden % self.num_heads:
            raise ValueError("hidden must be divisible by num_heads")
        if self.attention_window < 1:
            raise ValueError("attention_window must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.num_layers < 1 or self.ffn_multiplier < 1:
            raise ValueError("num_layers and ffn_multiplier must be positive")


def init_temporal_params(cfg: TemporalEncoderConfig, input_dim: int, rng: np.random.Generator) -> Params:
    p: Params = {}
    H = cfg.hidden
    if input_dim != H:
        p["in.W"] = glorot(rng, input_dim, H)
        p["in.b"] = np.zeros(H)
    F = cfg.ffn_multiplier * H
    for layer in range(cfg.num_layers):
        pre = f"l{layer}."
        p[pre + "ln1.g"] = np.ones(H)
        p[pre + "ln1.b"] = np.zeros(H)
        for name in ("q", "k", "v", "o"):
            p[pre + f"W{name}"] = glorot(rng, H, H)
            p[pre + f"b{name}"] = np.zeros(H)
        p[pre + "ln2.g"] = np.ones(H)
        p[pre + "ln2.b"] = np.zeros(H)
        p[pre + "W1"] = he(rng, H, F)
        p[pre + "b1"] = np.zeros(F)
        p[pre + "W2"] = glorot(rng, F, H)
        p[pre + "b2"] = np.zeros(H)
    return p


def _split_heads(x, n_heads):
    T, D = x.shape
    return x.reshape(T, n_heads, D // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    H, T, d = x.shape
    return x.transpose(1, 0, 2).reshape(T, H * d)


def temporal_forward(seq: FrameFeatureSequence, cfg: TemporalEncoderConfig, params: Params, rng=None):
    """Returns ``(pooled, per_frame, cache)``; ``rng`` enables dropout."""
    mask = seq.frame_mask
    x_in = np.where(mask[:, None], seq.frames, 0.0)
    if "in.W" in params:
        x = x_in @ params["in.W"] + params["in.b"]
    else:
        if x_in.shape[1] != cfg.hidden:
            raise ValueError(f"frame dim {x_in.shape[1]} != hidden {cfg.hidden} and no input projection")
        x = x_in.copy()
    if cfg.position_encoding:
        x = x + sinusoidal_positions(seq.T, cfg.hidden)
    cache = {"x_in": x_in, "mask": mask, "layers": []}
    for layer in range(cfg.num_layers):
        pre = f"l{layer}."
        a, ln1 = layer_norm_fwd(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        q = _split_heads(a @ params[pre + "Wq"] + params[pre + "bq"], cfg.num_heads)
        k = _split_heads(a @ params[pre + "Wk"] + params[pre + "bk"], cfg.num_heads)
        v = _split_heads(a @ params[pre + "Wv"] + params[pre + "bv"], cfg.num_heads)
        ctx, weights = kernels.local_attention_fwd(q, k, v, cfg.attention_window, mask)
        ctx_m = _merge_heads(ctx)
        o = ctx_m @ params[pre + "Wo"] + params[pre + "bo"]
        m1 = dropout_mask(rng, o.shape, cfg.dropout)
        h = x + (o if m1 is None else o * m1)
        b, ln2 = layer_norm_fwd(h, params[pre + "ln2.g"], params[pre + "ln2.b"])
        u = b @ params[pre + "W1"] + params[pre + "b1"]
        r = relu(u)
        f = r @ params[pre + "W2"] + params[pre + "b2"]
        m2 = dropout_mask(rng, f.shape, cfg.dropout)
        x_next = h + (f if m2 is None else f * m2)
        cache["layers"].append(
            dict(a=a, ln1=ln1, q=q, k=k, v=v, ctx_m=ctx_m, weights=weights, m1=m1, b=b, ln2=ln2, u=u, r=r, m2=m2)
        )
        x = x_next
    count = mask.sum()
    pooled = (x * mask[:, None]).sum(axis=0) / count
    return pooled, x, cache


def temporal_backward(dpooled, dper_frame, cache, cfg: TemporalEncoderConfig, params: Params) -> Params:
    """Gradients of all temporal params given upstream grads on the outputs.

    ``dper_frame`` may be ``None`` when only the pooled vector feeds the loss.
    """
    mask = cache["mask"]
    grads: Params = {}
    dx = np.outer(mask, dpooled) / mask.sum()
    if dper_frame is not None:
        dx = dx + dper_frame
    for layer in reversed(range(cfg.num_layers)):
        pre = f"l{layer}."
        c = cache["layers"][layer]
        # feed-forward branch
        dh = dx.copy()
        df = dx if c["m2"] is None else dx * c["m2"]
        grads[pre + "W2"] = c["r"].T @ df
        grads[pre + "b2"] = df.sum(axis=0)
        dr = df @ params[pre + "W2"].T
        du = dr * (c["u"] > 0)
        grads[pre + "W1"] = c["b"].T @ du
        grads[pre + "b1"] = du.sum(axis=0)
        db = du @ params[pre + "W1"].T
        dln2, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = layer_norm_bwd(db, c["ln2"], params[pre + "ln2.g"])
        dh += dln2
        # attention branch
        dx = dh.copy()
        do = dh if c["m1"] is None else dh * c["m1"]
        grads[pre + "Wo"] = c["ctx_m"].T @ do
        grads[pre + "bo"] = do.sum(axis=0)
        dctx = _split_heads(do @ params[pre + "Wo"].T, cfg.num_heads)
        dq, dk, dv = kernels.local_attention_bwd(dctx, c["q"], c["k"], c["v"], c["weights"], cfg.attention_window)
        da = np.zeros_like(c["a"])
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dm = _merge_heads(dproj)
            grads[pre + f"W{name}"] = c["a"].T @ dm
            grads[pre + f"b{name}"] = dm.sum(axis=0)
            da += dm @ params[pre + f"W{name}"].T
        dln1, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = layer_norm_bwd(da, c["ln1"], params[pre + "ln1.g"])
        dx += dln1
    if "in.W" in params:
        grads["in.W"] = cache["x_in"].T @ dx
        grads["in.b"] = dx.sum(axis=0)
    return grads


def temporal_encode(seq: FrameFeatureSequence, cfg: TemporalEncoderConfig, params: Params, producer_id="video-temporal-v1"):
    """Eval-mode forward; returns ``(pooled Embedding, per_frame matrix)``."""
    pooled, per_frame, _ = temporal_forward(seq, cfg, params)
    return Embedding(ModalityKind.VIDEO, producer_id, pooled), per_frame


# ------------------------------------------------------------ classifier head


def init_video_head(hidden: int, n_labels: int, rng: np.random.Generator) -> Params:
    return {
        "head.W1": he(rng, hidden, HEAD_HIDDEN),
        "head.b1": np.zeros(HEAD_HIDDEN),
        "head.W2": glorot(rng, HEAD_HIDDEN, n_labels),
        "head.b2": np.zeros(n_labels),
    }


def video_head_forward(pooled: np.ndarray, params: Params):
    if pooled.shape[-1] != params["head.W1"].shape[0]:
        raise ValueError(f"pooled dim {pooled.shape[-1]} != head input {params['head.W1'].shape[0]}")
    u = pooled @ params["head.W1"] + params["head.b1"]
    r = relu(u)
    return r @ params["head.W2"] + params["head.b2"], (pooled, u, r)


def video_head_backward(dlogits, cache, params: Params):
    pooled, u, r = cache
    grads = {
        "head.W2": np.outer(r, dlogits) if r.ndim == 1 else r.T @ dlogits,
        "head.b2": dlogits if dlogits.ndim == 1 else dlogits.sum(axis=0),
    }
    du = (dlogits @ params["head.W2"].T) * (u > 0)
    grads["head.W1"] = np.outer(pooled, du) if pooled.ndim == 1 else pooled.T @ du
    grads["head.b1"] = du if du.ndim == 1 else du.sum(axis=0)
    dpooled = du @ params["head.W1"].T
    return grads, dpooled


def video_classify(pooled: Embedding | np.ndarray, head_params: Params) -> np.ndarray:
    """Logits over the label space: affine -> ReLU -> affine (hidden 512)."""
    vec = pooled.values.astype(np.float64) if isinstance(pooled, Embedding) else np.asarray(pooled, dtype=np.float64)
    logits, _ = video_head_forward(vec, head_params)
    return logits


# ------------------------------------------------------------ trainable model


class VideoModel:
    """Temporal encoder plus head, trained on :class:`FrameFeatureSequence` inputs."""

    kind = "video_temporal"

    def __init__(self, cfg: TemporalEncoderConfig, input_dim: int, n_labels: int, seed: int = 0, params=None):
        self.cfg = cfg
        self.input_dim = input_dim
        self.n_labels = n_labels
        if params is None:
            rng = np.random.default_rng(seed)
            params = init_temporal_params(cfg, input_dim, rng)
            params.update(init_video_head(cfg.hidden, n_labels, rng))
        self.params = params

    def config_dict(self) -> dict:
        return {"temporal": asdict(self.cfg), "input_dim": self.input_dim, "n_labels": self.n_labels}

    @classmethod
    def from_config(cls, config: dict, params: Params) -> VideoModel:
        return cls(TemporalEncoderConfig(**config["temporal"]), config["input_dim"], config["n_labels"], params=params)

    def logits(self, inputs: Sequence[FrameFeatureSequence]) -> np.ndarray:
        out = []
        for seq in inputs:
            pooled, _, _ = temporal_forward(seq, self.cfg, self.params)
            out.append(video_classify(pooled, self.params))
        return np.array(out)

    def loss_and_grads(self, inputs, labels, rng=None):
        from .training import cross_entropy

        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        total = 0.0
        n = len(inputs)
        for seq, y in zip(inputs, labels):
            pooled, _, cache = temporal_forward(seq, self.cfg, self.params, rng)
            logits, hcache = video_head_forward(pooled, self.params)
            loss, dlogits = cross_entropy(logits, int(y))
            total += loss
            hgrads, dpooled = video_head_backward(dlogits / n, hcache, self.params)
            tgrads = temporal_backward(dpooled, None, cache, self.cfg, self.params)
            for g in (hgrads, tgrads):
                for k, v in g.items():
                    grads[k] += v
        return total / n, grads
