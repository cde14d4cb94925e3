"""Joint training of trunk and conditioning parameters with ternary cross-entropy."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import vad
from .autodiff import Tape, Tensor
from .checkpoint import Checkpoint, load_checkpoint
from .conditioning import (ConditioningMode, HyperNetConfig, condition_vectors, hyper_config_of,
                           init_conditioning, set_embed_norm, vad_config_for)
from .embed import EMBED_DIM, PROJECTION_SEED, embed, projection_matrix
from .errors import ConfigError, DivergenceError
from .evaluation import average_precision
from .features import MelConfig, log_mel, read_wav
from .model import PVADModel
from .synth import read_header, read_manifest, record_labels
from .vad import CLASSES, NTSS, TSS, ParamStore, VadConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mode: str = "hywa"
    injection_site: str | None = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 5
    min_delta: float = 1e-4
    grad_clip: float = 5.0
    seed: int = 0
    class_weights: str = "none"          # "none" | "inverse"
    init_from: str = "scratch"           # "scratch" | path to a checkpoint
    embed_dim: int = EMBED_DIM
    embed_seed: int = PROJECTION_SEED
    hyper_hidden: int = 384
    hyper_blocks: int = 4
    hyper_output_scale: float = 0.01
    patch_targets: tuple = ("pre_mlp.1", "post_mlp", "head")

    def __post_init__(self):
        self.patch_targets = tuple(self.patch_targets)
        for name in ("lr", "batch_size", "max_epochs", "grad_clip", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.class_weights not in ("none", "inverse"):
            raise ConfigError(f"class_weights must be 'none' or 'inverse', got {self.class_weights!r}")
        ConditioningMode(self.mode, self.injection_site, self.embed_dim)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_targets"] = list(self.patch_targets)
        return d

    @property
    def conditioning(self) -> ConditioningMode:
        return ConditioningMode(self.mode, self.injection_site, self.embed_dim)

    @property
    def hyper(self) -> HyperNetConfig:
        return HyperNetConfig(self.embed_dim, self.hyper_hidden, self.hyper_blocks, self.hyper_output_scale)


@dataclass
class Example:
    id: str
    features: np.ndarray
    labels: np.ndarray
    embedding: np.ndarray
    scenario: str = "clean"
    snr_db: float | None = None
    speaker: str = ""


def load_examples(corpus_dir, split: str, projection: np.ndarray, mel: MelConfig = MelConfig(),
                  cache: dict | None = None) -> list[Example]:
    """Features, span-derived labels and enrollment embeddings for one split."""
    corpus_dir = Path(corpus_dir)
    read_header(corpus_dir)
    cache = {} if cache is None else cache
    out = []
    for rec in read_manifest(corpus_dir, split):
        feats = log_mel(read_wav(corpus_dir / rec["path"]), mel).frames
        labels = record_labels(rec, mel)
        if labels.size != feats.shape[0]:
            raise ConfigError(f"{rec['id']}: {labels.size} labels for {feats.shape[0]} frames")
        key = rec["enrollment"]
        if key not in cache:
            cache[key] = embed(read_wav(corpus_dir / key), projection, mel).values
        out.append(Example(rec["id"], feats, labels.astype(np.int64), cache[key], rec["scenario"],
                           rec["snr_db"], rec["target_speaker"]))
    return out


def build_model(cfg: TrainConfig, mel: MelConfig = MelConfig()) -> PVADModel:
    mode = cfg.conditioning
    base = VadConfig(input_dim=mel.n_mels, patch_targets=cfg.patch_targets)
    vcfg = vad_config_for(mode, base)
    w = vad.init_params(vcfg, cfg.seed)
    cond = init_conditioning(mode, vcfg, cfg.hyper if mode.kind == "hywa" else None, cfg.seed)
    proj = projection_matrix(2 * mel.n_mels, cfg.embed_dim, cfg.embed_seed)
    if cfg.init_from != "scratch":
        warm = load_checkpoint(cfg.init_from).model.vad
        if warm.layout_records() != w.layout_records():
            raise ConfigError(f"{cfg.init_from}: trunk layout differs from the {mode.kind} trunk")
        w = w.with_values(warm.values.copy())
    return PVADModel(mode, w, cond, proj, mel)


def target_labels(labels: np.ndarray, mode: ConditioningMode) -> np.ndarray:
    """Plain VAD training merges ntss into the speech (tss) class."""
    if mode.kind == "none":
        return np.where(labels == NTSS, TSS, labels)
    return labels


class Adam:
    def __init__(self, sizes: dict, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(n, np.float32) for k, n in sizes.items()}
        self.v = {k: np.zeros(n, np.float32) for k, n in sizes.items()}
        self.t = 0

    def update(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            params[k] -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def pad_batch(batch: list[Example], mode: ConditioningMode, class_weights: np.ndarray | None, dtype):
    T = max(e.features.shape[0] for e in batch)
    F = batch[0].features.shape[1]
    x = np.zeros((len(batch), T, F), dtype)
    y = np.zeros((len(batch), T), np.int64)
    wts = np.zeros((len(batch), T), dtype)
    for k, e in enumerate(batch):
        n = e.features.shape[0]
        x[k, :n] = e.features
        y[k, :n] = target_labels(e.labels, mode)
        wts[k, :n] = 1.0 if class_weights is None else class_weights[y[k, :n]]
    return x, y.reshape(-1), wts.reshape(-1)


def loss_and_grads(model: PVADModel, batch: list[Example], class_weights=None,
                   need_grads: bool = True):
    """Mean frame cross-entropy and gradients as flat vectors ``{"vad": ..., "cond": ...}``."""
    dt = model.vad.values.dtype
    x, y, wts = pad_batch(batch, model.mode, class_weights, dt)
    stores = {"vad": model.vad, "cond": model.cond}

    def composed_loss(tensors):
        vectors = {}
        if model.mode.personalized:
            s = Tensor(np.stack([e.embedding for e in batch]).astype(dt))
            vectors = condition_vectors(model.mode, tensors["cond"], s, hyper_config_of(model.cond))
        logits = vad.trunk(tensors["vad"], model.vad.config, Tensor(x), vectors)
        return ad.softmax_cross_entropy(ad.reshape(logits, (-1, logits.shape[-1])), y, wts)

    if not need_grads:
        plain = {k: {n: Tensor(a) for n, a in st.arrays().items()} for k, st in stores.items()}
        return float(composed_loss(plain).data), None
    with Tape() as tape:
        tensors = {k: {n: tape.watch(a, n) for n, a in st.arrays().items()} for k, st in stores.items()}
        loss = composed_loss(tensors)
        g = ad.backward(tape, loss)
    grads = {}
    for k, st in stores.items():
        flat = np.empty(st.size, dt)
        for e in st.layout:
            flat[e.offset:e.offset + e.size] = g[tensors[k][e.name].node_id].ravel()
        grads[k] = flat
    return float(loss.data), grads


@dataclass
class TrainState:
    model: PVADModel
    config: TrainConfig
    optimizer: Adam
    class_weights: np.ndarray | None = None
    last_loss: float | None = None
    last_grad_norm: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)


def init_state(cfg: TrainConfig, mel: MelConfig = MelConfig(), model: PVADModel | None = None) -> TrainState:
    model = model or build_model(cfg, mel)
    opt = Adam({"vad": model.vad.size, "cond": model.cond.size}, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    masks = {"vad": vad.trainable_mask(model.vad), "cond": vad.trainable_mask(model.cond)}
    return TrainState(model, cfg, opt, masks=masks)


def train_step(state: TrainState, batch: list[Example]) -> float:
    """Forward, backward, global-norm clip, Adam.  Updates ``state.model`` in place; returns the loss."""
    loss, grads = loss_and_grads(state.model, batch, state.class_weights)
    grads = {k: np.where(state.masks[k], g, 0).astype(g.dtype) if k in state.masks else g
             for k, g in grads.items()}
    if not np.isfinite(loss):
        raise DivergenceError(f"loss became {loss}", state.last_loss)
    norms = {k: float(np.linalg.norm(g.astype(np.float64))) for k, g in grads.items()}
    total = float(np.sqrt(sum(n * n for n in norms.values())))
    if not np.isfinite(total):
        raise DivergenceError("gradient is not finite", state.last_loss)
    if total > state.config.grad_clip:
        scale = np.float32(state.config.grad_clip / total)
        grads = {k: g * scale for k, g in grads.items()}
    params = {"vad": state.model.vad.values, "cond": state.model.cond.values}
    state.optimizer.update(params, grads)
    state.last_loss = loss
    state.last_grad_norm = norms
    return loss


def _inverse_frequency(examples: list[Example], mode: ConditioningMode) -> np.ndarray:
    counts = np.bincount(np.concatenate([target_labels(e.labels, mode) for e in examples]), minlength=3)
    present = counts > 0
    w = np.zeros(3, np.float32)
    w[present] = counts.sum() / (present.sum() * counts[present])
    return w


def batches(examples: list[Example], batch_size: int, rng: np.random.Generator) -> list[list[Example]]:
    """Length-bucketed batches in random order."""
    keys = np.array([e.features.shape[0] for e in examples]) + rng.uniform(0, 50, len(examples))
    order = np.argsort(keys, kind="stable")
    groups = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [[examples[j] for j in groups[k]] for k in rng.permutation(len(groups))]


def validation_scores(model: PVADModel, examples: list[Example]) -> tuple[float, float]:
    """Frame-weighted cross-entropy and mAP on ``examples``."""
    logits = model.predict(examples)
    z = np.concatenate(logits).astype(np.float64)
    y = np.concatenate([target_labels(e.labels, model.mode) for e in examples])
    logp = z - z.max(axis=1, keepdims=True)
    logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(y.size), y].mean())
    p = np.exp(logp)
    if model.mode.kind == "none":
        aps = [average_precision(p[:, 0], y == 0), average_precision(p[:, 1] + p[:, 2], y != 0)]
    else:
        aps = [average_precision(p[:, k], y == k) for k in range(len(CLASSES)) if (y == k).any()]
    return loss, float(np.mean(aps))


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_map: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    wall_clock_s: float = 0.0
    stopped_early: bool = False

    def log_records(self) -> list[dict]:
        out = []
        for ep, (tl, vl, vm) in enumerate(zip(self.train_loss, self.val_loss, self.val_map)):
            out.append({"epoch": ep, "split": "train", "loss": tl, "mAP": None})
            out.append({"epoch": ep, "split": "valid", "loss": vl, "mAP": vm})
        return out

    def write_log(self, path) -> None:
        with open(path, "w") as f:
            for rec in self.log_records():
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def fit(cfg: TrainConfig, train: list[Example], valid: list[Example],
        mel: MelConfig = MelConfig(), corpus_header: dict | None = None) -> tuple[Checkpoint, TrainReport]:
    """Train until validation loss stops improving by ``min_delta`` for ``patience`` epochs.

    Returns the checkpoint of the best validation epoch.
    """
    if not train or not valid:
        raise ConfigError("training needs non-empty train and valid splits")
    F = train[0].features.shape[1]
    if F != mel.n_mels:
        raise ConfigError(f"corpus features have {F} bins, config expects {mel.n_mels}")
    E = train[0].embedding.size
    if cfg.conditioning.personalized and E != cfg.embed_dim:
        raise ConfigError(f"corpus embeddings have {E} dims, config expects {cfg.embed_dim}")
    model = build_model(cfg, mel)
    if cfg.init_from == "scratch":
        model.vad = vad.set_input_norm(model.vad, np.concatenate([e.features for e in train]))
    enrollments = {e.embedding.tobytes(): e.embedding for e in train}
    if cfg.conditioning.personalized:
        model.cond = set_embed_norm(model.cond, np.stack(list(enrollments.values())))
    state = init_state(cfg, mel, model)
    if cfg.class_weights == "inverse":
        state.class_weights = _inverse_frequency(train, cfg.conditioning)
    model = state.model
    report = TrainReport()
    best = (model.vad.values.copy(), model.cond.values.copy())
    bad = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        losses, frames = 0.0, 0
        for batch in batches(train, cfg.batch_size, rng):
            n = sum(e.features.shape[0] for e in batch)
            losses += train_step(state, batch) * n
            frames += n
        val_loss, val_map = validation_scores(model, valid)
        report.train_loss.append(losses / frames)
        report.val_loss.append(val_loss)
        report.val_map.append(val_map)
        log.info("epoch %d train %.4f valid %.4f mAP %.4f", epoch, losses / frames, val_loss, val_map)
        if report.best_val_loss - val_loss > cfg.min_delta:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best = (model.vad.values.copy(), model.cond.values.copy())
            bad = 0
        else:
            bad += 1
            if bad >= max(cfg.patience, 1):
                report.stopped_early = True
                break
    report.wall_clock_s = time.perf_counter() - t0
    final = PVADModel(model.mode, model.vad.with_values(best[0]), model.cond.with_values(best[1]),
                      model.projection, mel)
    config = {"train": cfg.to_dict(), "mel": asdict(mel), "vad": final.vad.config.to_dict(),
              "corpus_seed": (corpus_header or {}).get("master_seed")}
    return Checkpoint(final, config, {"train": cfg.seed, "embed_projection": cfg.embed_seed}), report


def fit_corpus(cfg: TrainConfig, corpus_dir, mel: MelConfig = MelConfig()):
    proj = projection_matrix(2 * mel.n_mels, cfg.embed_dim, cfg.embed_seed)
    cache: dict = {}
    train = load_examples(corpus_dir, "train", proj, mel, cache)
    valid = load_examples(corpus_dir, "valid", proj, mel, cache)
    return fit(cfg, train, valid, mel, read_header(corpus_dir))
