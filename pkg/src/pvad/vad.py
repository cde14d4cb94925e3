"""Base VAD: MLP -> 2-layer LSTM -> MLP -> 3 logits, with flat parameter storage.

Layer names (a layer owns ``<layer>.weight``/``<layer>.bias`` or, for LSTMs,
``weight_ih``/``weight_hh``/``bias``)::

    pre_mlp.0, pre_mlp.1, lstm.0, lstm.1, post_mlp, head

plus ``input_norm.shift``/``input_norm.scale``, a per-bin feature standardiser
that is estimated from training data and never updated by the optimiser.

Sequences are processed batch-major, ``(B, T, F)``.  Per-sequence conditioning
vectors arrive through a ``vectors`` mapping:

    ``features_add`` / ``features_mul`` / ``features_concat``  (B, *)
    ``hidden_add`` / ``hidden_mul`` / ``hidden_concat``        (B, *)
    ``delta``  per-sequence flat weight deltas for the patch targets (B, P)

``features_*`` act on the trunk input, ``hidden_*`` on the LSTM input.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, PatchError

CLASSES = ("ns", "tss", "ntss")
NS, TSS, NTSS = 0, 1, 2
FROZEN_PREFIXES = ("input_norm.", "embed_norm.")   # data statistics, not learned


@dataclass(frozen=True)
class VadConfig:
    input_dim: int = 40
    pre_dims: tuple = (64, 64)
    lstm_hidden: int = 64
    lstm_layers: int = 2
    post_dim: int = 64
    n_classes: int = 3
    input_extra: int = 0        # widening of pre_mlp.0 input (concat at the features)
    lstm_input_extra: int = 0   # widening of lstm.0 input (concat at LSTM input)
    patch_targets: tuple = ("pre_mlp.1", "post_mlp", "head")

    def __post_init__(self):
        object.__setattr__(self, "pre_dims", tuple(self.pre_dims))
        object.__setattr__(self, "patch_targets", tuple(self.patch_targets))
        bad = [t for t in self.patch_targets if t not in self.layer_names()]
        if bad:
            raise PatchError(f"patch targets {bad} are not layers of this VAD")

    def layer_names(self) -> list[str]:
        return ([f"pre_mlp.{i}" for i in range(len(self.pre_dims))]
                + [f"lstm.{i}" for i in range(self.lstm_layers)] + ["post_mlp", "head"])

    def shapes(self) -> list[tuple[str, tuple]]:
        d = self.input_dim
        out = [("input_norm.shift", (d,)), ("input_norm.scale", (d,))]
        d += self.input_extra
        for i, n in enumerate(self.pre_dims):
            out += [(f"pre_mlp.{i}.weight", (d, n)), (f"pre_mlp.{i}.bias", (n,))]
            d = n
        d += self.lstm_input_extra
        H = self.lstm_hidden
        for i in range(self.lstm_layers):
            out += [(f"lstm.{i}.weight_ih", (d, 4 * H)), (f"lstm.{i}.weight_hh", (H, 4 * H)),
                    (f"lstm.{i}.bias", (4 * H,))]
            d = H
        out += [("post_mlp.weight", (d, self.post_dim)), ("post_mlp.bias", (self.post_dim,)),
                ("head.weight", (self.post_dim, self.n_classes)), ("head.bias", (self.n_classes,))]
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pre_dims"] = list(self.pre_dims)
        d["patch_targets"] = list(self.patch_targets)
        return d


def layer_of(name: str) -> str:
    return name.rsplit(".", 1)[0]


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return math.prod(self.shape)


class ParamStore:
    """Named views over one flat parameter vector."""

    def __init__(self, layout: Sequence[LayoutEntry], values: np.ndarray, config=None):
        values = np.asarray(values)
        pos = 0
        for e in layout:
            if e.offset != pos:
                raise ValueError(f"layout gap/overlap at {e.name}")
            pos += e.size
        if pos != values.size:
            raise ValueError(f"layout covers {pos} values, vector has {values.size}")
        self.layout = list(layout)
        self.values = values
        self.config = config
        self._index = {e.name: e for e in self.layout}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], config=None, dtype=np.float32):
        layout, pos = [], 0
        for name, a in arrays.items():
            shape = tuple(np.shape(a))
            layout.append(LayoutEntry(name, pos, shape))
            pos += int(np.prod(shape, dtype=np.int64))
        values = np.empty(pos, dtype=dtype)
        for e in layout:
            values[e.offset:e.offset + e.size] = np.ravel(arrays[e.name])
        return cls(layout, values, config)

    def __getitem__(self, name: str) -> np.ndarray:
        e = self._index[name]
        return self.values[e.offset:e.offset + e.size].reshape(e.shape)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.layout)

    def entry(self, name: str) -> LayoutEntry:
        return self._index[name]

    def names(self) -> list[str]:
        return [e.name for e in self.layout]

    @property
    def size(self) -> int:
        return self.values.size

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: self[n] for n in self.names()}

    def copy(self) -> "ParamStore":
        return ParamStore(self.layout, self.values.copy(), self.config)

    def astype(self, dtype) -> "ParamStore":
        return ParamStore(self.layout, self.values.astype(dtype), self.config)

    def with_values(self, values: np.ndarray) -> "ParamStore":
        return ParamStore(self.layout, values, self.config)

    def layout_records(self) -> list[list]:
        return [[e.name, e.offset, list(e.shape)] for e in self.layout]


def _xavier(rng, shape):
    fan_in, fan_out = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: VadConfig = VadConfig(), seed: int = 0) -> ParamStore:
    """Xavier-uniform matrices, zero biases, LSTM forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    H = config.lstm_hidden
    arrays = {}
    for name, shape in config.shapes():
        if len(shape) == 2:
            arrays[name] = _xavier(rng, shape)
        else:
            b = np.ones(shape) if name == "input_norm.scale" else np.zeros(shape)
            if name.startswith("lstm."):
                b[H:2 * H] = 1.0
            arrays[name] = b
    return ParamStore.from_arrays(arrays, config)


def param_count(config: VadConfig, trainable_only: bool = False) -> int:
    return sum(int(np.prod(s)) for n, s in config.shapes()
               if not (trainable_only and n.startswith(FROZEN_PREFIXES)))


def trainable_mask(store: ParamStore) -> np.ndarray:
    """Boolean mask over ``store.values``; False for the frozen normalisation entries."""
    mask = np.ones(store.size, bool)
    for e in store.layout:
        if e.name.startswith(FROZEN_PREFIXES):
            mask[e.offset:e.offset + e.size] = False
    return mask


def set_input_norm(w: ParamStore, frames: np.ndarray) -> ParamStore:
    """Copy of ``w`` whose input standardiser uses the per-bin mean/std of ``frames``."""
    frames = np.asarray(frames, np.float64)
    if frames.ndim != 2 or frames.shape[1] != w["input_norm.shift"].size:
        raise DimensionError(f"expected (N, {w['input_norm.shift'].size}) frames, got {frames.shape}")
    out = w.copy()
    out["input_norm.shift"][...] = frames.mean(axis=0)
    out["input_norm.scale"][...] = 1.0 / np.maximum(frames.std(axis=0), 1e-3)
    return out


# ---------------------------------------------------------------------------
# weight patches


@dataclass
class WeightPatch:
    """Additive deltas for a subset of layers; missing entries mean zero."""

    entries: dict = field(default_factory=dict)
    origin: str = "hypernet"

    def validate(self, w: ParamStore) -> None:
        targets = w.config.patch_targets if w.config is not None else ()
        for name, delta in self.entries.items():
            if name not in w:
                raise PatchError(f"patch entry {name!r} is not a parameter of the VAD")
            if layer_of(name) not in targets:
                raise PatchError(f"layer {layer_of(name)!r} is not a patch target {list(targets)}")
            if np.shape(delta) != w.entry(name).shape:
                raise PatchError(f"patch entry {name!r}: shape {np.shape(delta)} "
                                 f"!= {w.entry(name).shape}")

    @property
    def size(self) -> int:
        return sum(int(np.size(d)) for d in self.entries.values())


def target_entries(w_or_config) -> list[tuple[str, tuple]]:
    """Parameters covered by the patch targets, in layout order."""
    cfg = w_or_config.config if isinstance(w_or_config, ParamStore) else w_or_config
    return [(n, s) for n, s in cfg.shapes() if layer_of(n) in cfg.patch_targets]


def patch_size(config: VadConfig) -> int:
    return sum(int(np.prod(s)) for _, s in target_entries(config))


def zero_patch(w: ParamStore) -> WeightPatch:
    return WeightPatch({n: np.zeros(s, w.values.dtype) for n, s in target_entries(w)}, "zero")


def split_patch(flat: np.ndarray, config: VadConfig, origin: str = "hypernet") -> WeightPatch:
    entries, pos = {}, 0
    for name, shape in target_entries(config):
        n = int(np.prod(shape))
        entries[name] = np.asarray(flat[pos:pos + n]).reshape(shape)
        pos += n
    if pos != np.size(flat):
        raise PatchError(f"flat delta has {np.size(flat)} values, targets need {pos}")
    return WeightPatch(entries, origin)


def apply_patch(w: ParamStore, p: WeightPatch) -> ParamStore:
    """Return ``w + delta``; the input store is left untouched."""
    p.validate(w)
    out = w.copy()
    for name, delta in p.entries.items():
        e = w.entry(name)
        out.values[e.offset:e.offset + e.size] += np.ravel(delta).astype(w.values.dtype)
    return out


# ---------------------------------------------------------------------------
# forward computation


def _params_as_tensors(w) -> dict:
    if isinstance(w, ParamStore):
        return {n: Tensor(a) for n, a in w.arrays().items()}
    return w


def _dense(params, layer: str, x: Tensor, delta_slices=None) -> Tensor:
    """``x @ W + b`` over ``(B, T, d)``; per-sequence deltas when the layer is patched."""
    W, b = params[f"{layer}.weight"], params[f"{layer}.bias"]
    B, T, d = x.shape
    if d != W.shape[0]:
        raise DimensionError(f"{layer}: input width {d} != weight rows {W.shape[0]}")
    if delta_slices is None or f"{layer}.weight" not in delta_slices:
        y = ad.add(ad.matmul(ad.reshape(x, (B * T, d)), W), b)
        return ad.reshape(y, (B, T, W.shape[1]))
    dW, db = delta_slices[f"{layer}.weight"], delta_slices[f"{layer}.bias"]
    rows = []
    for i in range(B):
        Wi = ad.add(W, ad.index(dW, i))
        bi = ad.add(b, ad.index(db, i))
        rows.append(ad.add(ad.matmul(ad.index(x, i), Wi), bi))
    return ad.stack(rows)


def _condition(x: Tensor, vectors: Mapping, site: str) -> Tensor:
    T = x.shape[1]
    v = vectors.get(f"{site}_mul")
    if v is not None:
        x = ad.mul(x, ad.expand_time(v, T))
    v = vectors.get(f"{site}_add")
    if v is not None:
        x = ad.add(x, ad.expand_time(v, T))
    v = vectors.get(f"{site}_concat")
    if v is not None:
        x = ad.concat([x, ad.expand_time(v, T)], axis=-1)
    return x


def _delta_slices(params, config: VadConfig, vectors: Mapping):
    delta = vectors.get("delta")
    if delta is None:
        return None
    out, pos = {}, 0
    B = delta.shape[0]
    for name, shape in target_entries(config):
        n = int(np.prod(shape))
        out[name] = ad.reshape(ad.slice_last(delta, pos, pos + n), (B,) + tuple(shape))
        pos += n
    if pos != delta.shape[1]:
        raise DimensionError(f"delta width {delta.shape[1]} != patch size {pos}")
    return out


def trunk_front(params, config: VadConfig, x: Tensor, vectors: Mapping, deltas=None) -> Tensor:
    """Standardisation, conditioning and the pre-LSTM perceptron.  Returns the LSTM input ``(B, T, d)``."""
    if "input_norm.shift" in params:
        x = ad.mul(ad.sub(x, params["input_norm.shift"]), params["input_norm.scale"])
    h = _condition(x, vectors, "features")
    for i in range(len(config.pre_dims)):
        h = ad.gelu(_dense(params, f"pre_mlp.{i}", h, deltas))
    return _condition(h, vectors, "hidden")


def trunk_back(params, config: VadConfig, h: Tensor, deltas=None) -> Tensor:
    h = ad.gelu(_dense(params, "post_mlp", h, deltas))
    return _dense(params, "head", h, deltas)


def _lstm_layer(params, i: int, h: Tensor, deltas) -> Tensor:
    pre = f"lstm.{i}"
    Wih, Whh, b = params[f"{pre}.weight_ih"], params[f"{pre}.weight_hh"], params[f"{pre}.bias"]
    B, T, d = h.shape
    if d != Wih.shape[0]:
        raise DimensionError(f"{pre}: input width {d} != weight rows {Wih.shape[0]}")
    if deltas is None or f"{pre}.weight_ih" not in deltas:
        zx = ad.add(ad.matmul(ad.reshape(h, (B * T, d)), Wih), b)
        return ad.lstm_recurrence(ad.reshape(zx, (B, T, Wih.shape[1])), Whh)
    outs = []
    for k in range(B):
        Wk = ad.add(Wih, ad.index(deltas[f"{pre}.weight_ih"], k))
        bk = ad.add(b, ad.index(deltas[f"{pre}.bias"], k))
        Uk = ad.add(Whh, ad.index(deltas[f"{pre}.weight_hh"], k))
        zx = ad.add(ad.matmul(ad.index(h, k), Wk), bk)
        outs.append(ad.index(ad.lstm_recurrence(ad.reshape(zx, (1, T, Wih.shape[1])), Uk), 0))
    return ad.stack(outs)


def trunk(params, config: VadConfig, x: Tensor, vectors: Mapping | None = None) -> Tensor:
    """Batched forward ``(B, T, F) -> (B, T, n_classes)`` logits, taped if a tape is active."""
    vectors = vectors or {}
    deltas = _delta_slices(params, config, vectors)
    h = trunk_front(params, config, x, vectors, deltas)
    for i in range(config.lstm_layers):
        h = _lstm_layer(params, i, h, deltas)
    return trunk_back(params, config, h, deltas)


def _as_frames(features) -> np.ndarray:
    frames = getattr(features, "frames", features)
    return np.asarray(frames)


def forward(w: ParamStore, features, vectors: Mapping | None = None) -> np.ndarray:
    """Logits ``(T, 3)`` for one sequence, from zero initial state."""
    x = _as_frames(features)
    if x.ndim != 2:
        raise DimensionError(f"expected (T, F) features, got {x.shape}")
    x = x.astype(w.values.dtype, copy=False)[None]
    vec = {k: Tensor(np.asarray(v, w.values.dtype).reshape(1, -1)) for k, v in (vectors or {}).items()}
    return trunk(_params_as_tensors(w), w.config, Tensor(x), vec).data[0]


@dataclass
class StreamState:
    h: list
    c: list

    @classmethod
    def zeros(cls, config: VadConfig, dtype=np.float32) -> "StreamState":
        H = config.lstm_hidden
        return cls([np.zeros((1, H), dtype) for _ in range(config.lstm_layers)],
                   [np.zeros((1, H), dtype) for _ in range(config.lstm_layers)])

    def reset(self) -> "StreamState":
        for a in self.h + self.c:
            a[...] = 0
        return self

    def copy(self) -> "StreamState":
        return StreamState([a.copy() for a in self.h], [a.copy() for a in self.c])


def step(w: ParamStore, frame, state: StreamState, vectors: Mapping | None = None):
    """Advance one frame.  Returns ``(logits[3], new_state)``; ``state`` is not mutated."""
    cfg = w.config
    x = np.asarray(frame, w.values.dtype).reshape(1, 1, -1)
    vec = {k: Tensor(np.asarray(v, w.values.dtype).reshape(1, -1)) for k, v in (vectors or {}).items()}
    params = _params_as_tensors(w)
    h = trunk_front(params, cfg, Tensor(x), vec).data.reshape(1, -1)
    new = StreamState([], [])
    for i in range(cfg.lstm_layers):
        pre = f"lstm.{i}"
        if h.shape[1] != w[f"{pre}.weight_ih"].shape[0]:
            raise DimensionError(f"{pre}: input width {h.shape[1]} mismatch")
        zx = h @ w[f"{pre}.weight_ih"] + w[f"{pre}.bias"]
        h, c = ad.lstm_step_numpy(zx, state.h[i], state.c[i], w[f"{pre}.weight_hh"])
        new.h.append(h)
        new.c.append(c)
    logits = trunk_back(params, cfg, Tensor(h.reshape(1, 1, -1))).data.reshape(-1)
    return logits, new


def binary_collapse(logits) -> np.ndarray:
    """``(T, 3)`` logits -> ``(T, 2)`` probabilities ``[ns, speech]``."""
    p = ad.softmax(np.asarray(logits, dtype=np.float64))
    return np.stack([p[..., NS], p[..., TSS] + p[..., NTSS]], axis=-1)
