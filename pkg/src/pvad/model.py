"""A trained (trunk, conditioning, embedder) bundle and batched inference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import vad
from .autodiff import Tensor
from .conditioning import (ConditioningMode, PersonalizedVAD, condition_vectors, hyper_config_of,
                           personalize)
from .embed import SpeakerEmbedding, embed
from .features import MelConfig, Waveform
from .vad import ParamStore


@dataclass
class PVADModel:
    mode: ConditioningMode
    vad: ParamStore
    cond: ParamStore
    projection: np.ndarray
    mel: MelConfig = field(default_factory=MelConfig)

    def embed(self, wav: Waveform) -> SpeakerEmbedding:
        return embed(wav, self.projection, self.mel)

    def personalize(self, s: SpeakerEmbedding | np.ndarray | None) -> PersonalizedVAD:
        return personalize(self.mode, self.vad, self.cond, s)

    def batch_logits(self, features: list[np.ndarray], embeddings: np.ndarray | None,
                     batch_size: int = 32) -> list[np.ndarray]:
        """Logits for many sequences, padded into batches (outputs are causal, so padding is inert)."""
        dt = self.vad.values.dtype
        params = {n: Tensor(a) for n, a in self.vad.arrays().items()}
        cond = {n: Tensor(a) for n, a in self.cond.arrays().items()}
        hcfg = hyper_config_of(self.cond)
        order = np.argsort([f.shape[0] for f in features], kind="stable")
        out: list[np.ndarray | None] = [None] * len(features)
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            T = max(features[i].shape[0] for i in idx)
            x = np.zeros((len(idx), T, features[idx[0]].shape[1]), dt)
            for k, i in enumerate(idx):
                x[k, :features[i].shape[0]] = features[i]
            vectors = {}
            if self.mode.personalized:
                s = Tensor(np.asarray(embeddings, dt)[idx])
                vectors = condition_vectors(self.mode, cond, s, hcfg)
            logits = vad.trunk(params, self.vad.config, Tensor(x), vectors).data
            for k, i in enumerate(idx):
                out[i] = logits[k, :features[i].shape[0]]
        return out

    def predict(self, examples) -> list[np.ndarray]:
        """Logits for objects with ``features`` and ``embedding`` attributes."""
        feats = [e.features for e in examples]
        embs = np.stack([e.embedding for e in examples]) if self.mode.personalized else None
        return self.batch_logits(feats, embs)
