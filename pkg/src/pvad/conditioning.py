"""Speaker conditioning: concat / add / mul / FiLM baselines and the hypernetwork patcher."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from . import vad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, ModeError
from .vad import ParamStore, StreamState, VadConfig, WeightPatch

MODES = ("none", "concat", "add", "mul", "film", "hywa")
BASELINES = ("concat", "add", "mul", "film")
DEFAULT_SITE = {"concat": "features", "add": "features", "mul": "features", "film": "hidden"}


@dataclass(frozen=True)
class ConditioningMode:
    kind: str = "hywa"
    injection_site: str | None = None   # "features" or "hidden" (LSTM input)
    embed_dim: int = 64

    def __post_init__(self):
        if self.kind not in MODES:
            raise ConfigError(f"unknown conditioning mode {self.kind!r}; choose from {MODES}")
        site = self.injection_site
        if site is None:
            object.__setattr__(self, "injection_site", DEFAULT_SITE.get(self.kind))
        elif self.kind not in BASELINES:
            raise ConfigError(f"mode {self.kind!r} takes no injection site")
        elif site not in ("features", "hidden"):
            raise ConfigError(f"injection site must be 'features' or 'hidden', got {site!r}")

    @property
    def personalized(self) -> bool:
        return self.kind != "none"


@dataclass(frozen=True)
class HyperNetConfig:
    embed_dim: int = 64
    hidden: int = 384
    blocks: int = 4
    output_scale: float = 0.01


def vad_config_for(mode: ConditioningMode, base: VadConfig) -> VadConfig:
    """Widen the trunk input where concatenation needs it."""
    if mode.kind == "concat":
        if mode.injection_site == "features":
            return replace(base, input_extra=mode.embed_dim, lstm_input_extra=0)
        return replace(base, lstm_input_extra=mode.embed_dim)
    return base


def _site_width(mode: ConditioningMode, vcfg: VadConfig) -> int:
    return vcfg.input_dim if mode.injection_site == "features" else vcfg.pre_dims[-1]


def hypernet_shapes(hcfg: HyperNetConfig, out_dim: int) -> list[tuple[str, tuple]]:
    out, d = [], hcfg.embed_dim
    for i in range(hcfg.blocks):
        out += [(f"hyper.{i}.weight", (d, hcfg.hidden)), (f"hyper.{i}.bias", (hcfg.hidden,)),
                (f"hyper.{i}.ln_gain", (hcfg.hidden,)), (f"hyper.{i}.ln_bias", (hcfg.hidden,))]
        d = hcfg.hidden
    out += [("hyper.out.weight", (d, out_dim)), ("hyper.out.bias", (out_dim,))]
    return out


def hypernet_param_count(hcfg: HyperNetConfig, vcfg: VadConfig) -> int:
    return sum(int(np.prod(s)) for _, s in hypernet_shapes(hcfg, vad.patch_size(vcfg)))


def init_conditioning(mode: ConditioningMode, vcfg: VadConfig,
                      hcfg: HyperNetConfig | None = None, seed: int = 0) -> ParamStore:
    """Parameters of the conditioning path.  Identity at init for mul, FiLM and hywa."""
    rng = np.random.default_rng([seed, 1])
    E = mode.embed_dim
    arrays: dict[str, np.ndarray] = {}
    if mode.kind in ("add", "mul"):
        width = _site_width(mode, vcfg)
        if mode.kind == "add":
            lim = np.sqrt(6.0 / (E + width))
            arrays["cond.proj.weight"] = rng.uniform(-lim, lim, (E, width))
        else:
            arrays["cond.proj.weight"] = np.zeros((E, width))
        arrays["cond.proj.bias"] = np.zeros(width)
    elif mode.kind == "film":
        width = _site_width(mode, vcfg)
        arrays["film.gamma.weight"] = np.zeros((E, width))
        arrays["film.gamma.bias"] = np.ones(width)
        arrays["film.beta.weight"] = np.zeros((E, width))
        arrays["film.beta.bias"] = np.zeros(width)
    elif mode.kind == "hywa":
        hcfg = hcfg or HyperNetConfig(embed_dim=E)
        if hcfg.embed_dim != E:
            raise ConfigError(f"hypernet embed_dim {hcfg.embed_dim} != mode embed_dim {E}")
        for name, shape in hypernet_shapes(hcfg, vad.patch_size(vcfg)):
            if name.startswith("hyper.out"):
                arrays[name] = np.zeros(shape)
            elif name.endswith(".weight"):
                lim = np.sqrt(6.0 / sum(shape))
                arrays[name] = rng.uniform(-lim, lim, shape)
            elif name.endswith("ln_gain"):
                arrays[name] = np.ones(shape)
            else:
                arrays[name] = np.zeros(shape)
    if mode.personalized:
        arrays["embed_norm.shift"] = np.zeros(E)
        arrays["embed_norm.scale"] = np.ones(E)
    meta = {"mode": asdict(mode), "hyper": asdict(hcfg) if hcfg else None}
    return ParamStore.from_arrays(arrays, meta)


def set_embed_norm(cond: ParamStore, embeddings: np.ndarray) -> ParamStore:
    """Copy of ``cond`` that centres embeddings on the mean of ``embeddings``.

    The scale is one shared factor, the inverse per-dimension RMS deviation,
    so embedding coordinates reach the conditioning path at the same unit
    size as the standardised features while angles between embeddings are
    preserved.
    """
    if "embed_norm.shift" not in cond:
        return cond.copy()
    e = np.asarray(embeddings, np.float64)
    if e.ndim != 2 or e.shape[1] != cond["embed_norm.shift"].size or e.shape[0] < 2:
        raise DimensionError(f"need at least two {cond['embed_norm.shift'].size}-dim embeddings, got {e.shape}")
    mu = e.mean(axis=0)
    rms = np.sqrt(np.mean((e - mu) ** 2))
    out = cond.copy()
    out["embed_norm.shift"][...] = mu
    out["embed_norm.scale"][...] = 1.0 / max(rms, 1e-6)
    return out


def _standardize(cond, s: Tensor) -> Tensor:
    if "embed_norm.shift" not in cond:
        return s
    return ad.mul(ad.sub(s, cond["embed_norm.shift"]), cond["embed_norm.scale"])


# ---------------------------------------------------------------------------
# taped building blocks (work untaped too)


def _linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"projection expects width {W.shape[0]}, got {x.shape[-1]}")
    return ad.add(ad.matmul(x, W), b)


def hypernet_flat(theta, hcfg: HyperNetConfig, s: Tensor) -> Tensor:
    """``(B, E)`` embeddings -> ``(B, P)`` flat deltas.

    Each block is linear -> layer norm -> GELU, plus an identity skip whenever
    the block keeps its width; a zero-initialised linear layer emits the deltas.
    """
    if s.shape[-1] != hcfg.embed_dim:
        raise DimensionError(f"hypernet expects {hcfg.embed_dim}-dim embeddings, got {s.shape}")
    h = s
    for i in range(hcfg.blocks):
        p = f"hyper.{i}"
        y = ad.gelu(ad.layer_norm(_linear(h, theta[f"{p}.weight"], theta[f"{p}.bias"]),
                                  theta[f"{p}.ln_gain"], theta[f"{p}.ln_bias"]))
        h = ad.add(h, y) if h.shape == y.shape else y
    out = _linear(h, theta["hyper.out.weight"], theta["hyper.out.bias"])
    return ad.scale(out, hcfg.output_scale)


def film(hidden: Tensor, s: Tensor, film_params) -> Tensor:
    """``gamma(s) * h + beta(s)`` over a ``(T, d)`` feature map for one embedding."""
    hidden, s = ad.as_tensor(hidden), ad.as_tensor(s)
    s2 = ad.reshape(s, (1, -1)) if s.data.ndim == 1 else s
    gamma = _linear(s2, film_params["film.gamma.weight"], film_params["film.gamma.bias"])
    beta = _linear(s2, film_params["film.beta.weight"], film_params["film.beta.bias"])
    if gamma.shape[-1] != hidden.shape[-1]:
        raise DimensionError(f"FiLM generators emit {gamma.shape[-1]} features, map has {hidden.shape[-1]}")
    h3 = ad.reshape(hidden, (1,) + hidden.shape)
    out = _condition_film(h3, gamma, beta)
    return ad.reshape(out, hidden.shape)


def _condition_film(h3: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    T = h3.shape[1]
    return ad.add(ad.mul(h3, ad.expand_time(gamma, T)), ad.expand_time(beta, T))


def condition_vectors(mode: ConditioningMode, cond, s: Tensor, hcfg: HyperNetConfig | None = None) -> dict:
    """Per-sequence conditioning vectors consumed by :func:`vad.trunk`."""
    kind, site = mode.kind, mode.injection_site
    if kind == "none":
        return {}
    if s.shape[-1] != mode.embed_dim:
        raise DimensionError(f"embedding width {s.shape[-1]} != {mode.embed_dim}")
    s = _standardize(cond, s)
    if kind == "concat":
        return {f"{site}_concat": s}
    if kind == "add":
        return {f"{site}_add": _linear(s, cond["cond.proj.weight"], cond["cond.proj.bias"])}
    if kind == "mul":
        proj = _linear(s, cond["cond.proj.weight"], cond["cond.proj.bias"])
        return {f"{site}_mul": ad.add(proj, Tensor(np.ones(proj.shape[-1], proj.dtype)))}
    if kind == "film":
        return {f"{site}_mul": _linear(s, cond["film.gamma.weight"], cond["film.gamma.bias"]),
                f"{site}_add": _linear(s, cond["film.beta.weight"], cond["film.beta.bias"])}
    if hcfg is None:
        raise ConfigError("hywa conditioning needs a HyperNetConfig")
    return {"delta": hypernet_flat(cond, hcfg, s)}


def hyper_config_of(cond: ParamStore) -> HyperNetConfig | None:
    meta = cond.config or {}
    return HyperNetConfig(**meta["hyper"]) if meta.get("hyper") else None


def mode_of(cond: ParamStore) -> ConditioningMode:
    return ConditioningMode(**cond.config["mode"])


def _tensors(store: ParamStore) -> dict:
    return {n: Tensor(a) for n, a in store.arrays().items()}


def condition_features(mode: ConditioningMode, features, s, cond: ParamStore) -> np.ndarray:
    """Apply concat / add / mul conditioning to the ``(T, d)`` map at the injection site."""
    if mode.kind not in ("concat", "add", "mul"):
        raise ModeError(f"condition_features handles concat/add/mul, not {mode.kind!r}")
    x = np.asarray(getattr(features, "frames", features))
    dt = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    s = Tensor(np.asarray(getattr(s, "values", s), dt).reshape(1, -1))
    vec = condition_vectors(mode, _tensors(cond.astype(dt)), s)
    return vad._condition(Tensor(x.astype(dt)[None]), vec, mode.injection_site).data[0]


def hypernet_forward(theta: ParamStore, s, vcfg: VadConfig) -> WeightPatch:
    """Enrollment: one embedding -> the weight patch for ``vcfg.patch_targets``."""
    hcfg = hyper_config_of(theta)
    if hcfg is None:
        raise ModeError("parameters carry no hypernetwork")
    s = np.asarray(getattr(s, "values", s), theta.values.dtype).reshape(1, -1)
    params = _tensors(theta)
    flat = hypernet_flat(params, hcfg, _standardize(params, Tensor(s))).data[0]
    if flat.size != vad.patch_size(vcfg):
        raise DimensionError(f"hypernet emits {flat.size} deltas, VAD targets need {vad.patch_size(vcfg)}")
    return vad.split_patch(flat, vcfg)


class PersonalizedVAD:
    """Frame classifier specialised to one speaker embedding."""

    def __init__(self, w: ParamStore, vectors: dict | None = None, patch: WeightPatch | None = None):
        self.w = w
        self.vectors = vectors or {}
        self.patch = patch

    def forward(self, features) -> np.ndarray:
        return vad.forward(self.w, features, self.vectors)

    def new_state(self) -> StreamState:
        return StreamState.zeros(self.w.config, self.w.values.dtype)

    def step(self, frame, state: StreamState):
        return vad.step(self.w, frame, state, self.vectors)

    def stream(self, features) -> np.ndarray:
        frames = np.asarray(getattr(features, "frames", features))
        state = self.new_state()
        out = np.empty((frames.shape[0], self.w.config.n_classes), self.w.values.dtype)
        for t, x in enumerate(frames):
            out[t], state = self.step(x, state)
        return out


def personalize(mode: ConditioningMode, w: ParamStore, cond: ParamStore | None, s) -> PersonalizedVAD:
    """Specialise the trunk to embedding ``s``.

    hywa: the returned classifier is the plain VAD on ``w + hypernet(s)``.
    Baselines keep ``w`` and inject per-speaker vectors.
    """
    if mode.kind == "none" or s is None:
        if mode.kind not in ("none", "hywa"):
            raise ModeError(f"mode {mode.kind!r} needs a speaker embedding")
        return PersonalizedVAD(w)
    if cond is None or (cond.config and cond.config["mode"]["kind"] != mode.kind):
        raise ModeError(f"conditioning parameters do not belong to mode {mode.kind!r}")
    if mode.kind == "hywa":
        patch = hypernet_forward(cond, s, w.config)
        return PersonalizedVAD(vad.apply_patch(w, patch), patch=patch)
    s = np.asarray(getattr(s, "values", s), w.values.dtype).reshape(1, -1)
    vec = condition_vectors(mode, _tensors(cond.astype(w.values.dtype)), Tensor(s))
    return PersonalizedVAD(w, {k: v.data.reshape(-1) for k, v in vec.items()})
