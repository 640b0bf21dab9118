"""Feature-level fusion: concatenate per-modality embeddings in canonical
order and classify the result with an MLP. A single-modality subset is the
unimodal baseline through the same code path."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import ModalityKind, canonical_order
from .encoders import DimensionMismatchError, Embedding
from .layers import Params, dropout_mask, glorot, he, relu, softmax


@dataclass(frozen=True)
class LayoutEntry:
    modality: ModalityKind
    producer_id: str
    offset: int
    length: int


@dataclass(frozen=True, eq=False)
class MultimodalVector:
    values: np.ndarray
    layout: tuple[LayoutEntry, ...]
    present_mask: dict[ModalityKind, bool]

    def __post_init__(self):
        if self.values.shape[0] != sum(e.length for e in self.layout):
            raise ValueError("values length does not match layout")

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultimodalVector):
            return NotImplemented
        return (
            self.layout == other.layout
            and self.present_mask == other.present_mask
            and self.values.dtype == other.values.dtype
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None

    def segment(self, modality: ModalityKind | str) -> np.ndarray:
        entry = self._entry(modality)
        return self.values[entry.offset : entry.offset + entry.length]

    def _entry(self, modality) -> LayoutEntry:
        modality = ModalityKind(modality)
        for entry in self.layout:
            if entry.modality is modality:
                return entry
        raise KeyError(f"{modality.value} is not in this vector's layout")

    def extract(self) -> dict[ModalityKind, Embedding]:
        """Recover the embeddings (missing ones come back flagged ``missing``)."""
        out = {}
        for entry in self.layout:
            seg = self.values[entry.offset : entry.offset + entry.length]
            out[entry.modality] = Embedding(
                entry.modality, entry.producer_id, seg, missing=not self.present_mask[entry.modality]
            )
        return out

    def layout_dict(self) -> list[dict]:
        return [
            {"modality": e.modality.value, "producer_id": e.producer_id, "offset": e.offset, "length": e.length}
            for e in self.layout
        ]


def concat_fuse(
    embeddings: Mapping[ModalityKind, Embedding | None],
    subset,
    dims: Mapping[ModalityKind, int],
    l2_normalize: bool = False,
) -> MultimodalVector:
    """Concatenate the embeddings of ``subset`` in text, voice, face, video order.

    A modality absent from ``embeddings`` (or flagged ``missing``) becomes a
    zero block of its configured width with ``present_mask`` False.
    """
    dims = {ModalityKind(k): int(v) for k, v in dims.items()}
    parts = []
    layout = []
    present = {}
    offset = 0
    for modality in canonical_order(subset):
        if modality not in dims:
            raise KeyError(f"no configured dim for {modality.value}")
        width = dims[modality]
        emb = embeddings.get(modality)
        if emb is not None and emb.dim != width:
            raise DimensionMismatchError(f"{modality.value} embedding has dim {emb.dim}, configured {width}")
        if emb is None or emb.missing:
            seg = np.zeros(width, dtype=np.float32)
            present[modality] = False
        else:
            seg = emb.values
            if l2_normalize:
                norm = float(np.linalg.norm(seg.astype(np.float64)))
                seg = (seg / norm).astype(np.float32) if norm > 0 else seg
            present[modality] = True
        parts.append(seg)
        layout.append(LayoutEntry(modality, emb.producer_id if emb is not None else "", offset, width))
        offset += width
    if not parts:
        raise ValueError("subset must name at least one modality")
    values = np.concatenate(parts).astype(np.float32)
    values.setflags(write=False)
    return MultimodalVector(values, tuple(layout), present)


# ------------------------------------------------------------ MLP


@dataclass(frozen=True)
class MlpConfig:
    hidden_sizes: tuple[int, ...] = (512,)
    dropout: float = 0.2
    nonlinearity: str = field(default="relu", init=False)

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if any(h <= 0 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def init_mlp(cfg: MlpConfig, input_dim: int, n_labels: int, rng: np.random.Generator) -> Params:
    widths = [input_dim, *cfg.hidden_sizes, n_labels]
    p: Params = {}
    last = len(widths) - 2
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        p[f"mlp.W{i}"] = glorot(rng, a, b) if i == last else he(rng, a, b)
        p[f"mlp.b{i}"] = np.zeros(b)
    return p


def _n_layers(params: Params) -> int:
    return sum(1 for k in params if k.startswith("mlp.W"))


def _as_matrix(v) -> np.ndarray:
    x = v.values if isinstance(v, MultimodalVector) else v
    return np.asarray(x, dtype=np.float64)


def mlp_forward_train(x: np.ndarray, cfg: MlpConfig, params: Params, rng=None):
    """Forward with cache for backprop; ``rng`` enables dropout."""
    L = _n_layers(params)
    if x.shape[-1] != params["mlp.W0"].shape[0]:
        raise ValueError(f"input width {x.shape[-1]} != MLP input {params['mlp.W0'].shape[0]}")
    acts = [x]
    pre = []
    masks = []
    h = x
    for i in range(L):
        z = h @ params[f"mlp.W{i}"] + params[f"mlp.b{i}"]
        pre.append(z)
        if i < L - 1:
            h = relu(z)
            m = dropout_mask(rng, h.shape, cfg.dropout)
            masks.append(m)
            if m is not None:
                h = h * m
            acts.append(h)
        else:
            h = z
    return h, (acts, pre, masks)


def mlp_backward(dlogits: np.ndarray, cache, params: Params) -> tuple[Params, np.ndarray]:
    acts, pre, masks = cache
    L = len(pre)
    grads: Params = {}
    d = dlogits
    for i in reversed(range(L)):
        a = acts[i]
        grads[f"mlp.W{i}"] = np.outer(a, d) if a.ndim == 1 else a.T @ d
        grads[f"mlp.b{i}"] = d if d.ndim == 1 else d.sum(axis=0)
        d = d @ params[f"mlp.W{i}"].T
        if i > 0:
            if masks[i - 1] is not None:
                d = d * masks[i - 1]
            d = d * (pre[i - 1] > 0)
    return grads, d


def mlp_forward(v, cfg: MlpConfig, params: Params) -> np.ndarray:
    """Eval-mode logits for a vector or an ``(N, D)`` batch."""
    logits, _ = mlp_forward_train(_as_matrix(v), cfg, params)
    return logits


def predict(logits) -> tuple[int, np.ndarray]:
    """Softmax probabilities and the argmax label (lowest index wins ties)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise ValueError("logits must be finite")
    probs = softmax(logits)
    return int(np.argmax(logits)), probs


class FusionModel:
    """MLP over the concatenated vector of one modality subset."""

    kind = "fusion_mlp"

    def __init__(
        self,
        cfg: MlpConfig,
        dims: Mapping[ModalityKind, int],
        subset,
        n_labels: int,
        seed: int = 0,
        l2_normalize: bool = False,
        params=None,
    ):
        self.cfg = cfg
        self.subset = canonical_order(subset)
        self.dims = {m: int(dims[m]) for m in self.subset}
        self.n_labels = n_labels
        self.l2_normalize = l2_normalize
        self.input_dim = sum(self.dims.values())
        if params is None:
            params = init_mlp(cfg, self.input_dim, n_labels, np.random.default_rng(seed))
        self.params = params

    def config_dict(self) -> dict:
        return {
            "mlp": {"hidden_sizes": list(self.cfg.hidden_sizes), "dropout": self.cfg.dropout},
            "nonlinearity": self.cfg.nonlinearity,
            "subset": [m.value for m in self.subset],
            "dims": {m.value: d for m, d in self.dims.items()},
            "n_labels": self.n_labels,
            "l2_normalize": self.l2_normalize,
        }

    @classmethod
    def from_config(cls, config: dict, params: Params) -> FusionModel:
        cfg = MlpConfig(hidden_sizes=tuple(config["mlp"]["hidden_sizes"]), dropout=config["mlp"]["dropout"])
        dims = {ModalityKind(k): v for k, v in config["dims"].items()}
        return cls(cfg, dims, config["subset"], config["n_labels"], l2_normalize=config["l2_normalize"], params=params)

    def fuse(self, embeddings: Mapping[ModalityKind, Embedding | None]) -> MultimodalVector:
        return concat_fuse(embeddings, self.subset, self.dims, self.l2_normalize)

    def logits(self, inputs) -> np.ndarray:
        return mlp_forward(np.asarray(inputs, dtype=np.float64), self.cfg, self.params)

    def loss_and_grads(self, inputs, labels, rng=None):
        from .training import batch_cross_entropy

        x = np.asarray(inputs, dtype=np.float64)
        logits, cache = mlp_forward_train(x, self.cfg, self.params, rng)
        loss, dlogits = batch_cross_entropy(logits, np.asarray(labels))
        grads, _ = mlp_backward(dlogits, cache, self.params)
        return loss, grads

    def checkpoint_extra(self) -> dict:
        layout, offset = [], 0
        for m in self.subset:
            layout.append({"modality": m.value, "offset": offset, "length": self.dims[m]})
            offset += self.dims[m]
        return {"layout": layout}
