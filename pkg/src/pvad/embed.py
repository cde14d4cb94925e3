"""Deterministic speaker embeddings from log-mel statistics.

Stand-in for a trained speaker encoder: per-bin mean and standard deviation of
the log-mel frames of an enrollment utterance, projected by a fixed seeded
Gaussian matrix and L2-normalised.  Any other embedding source with the same
width can be fed to the conditioning layer instead.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EnrollmentError
from .features import MelConfig, Waveform, log_mel

EMBED_DIM = 64
PROJECTION_SEED = 20240917
MIN_ENROLL_S = 1.0
# frames more than 30 dB below the loudest frame are treated as silence
ACTIVITY_RANGE = np.log(10.0 ** 3)


@dataclass
class SpeakerEmbedding:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)

    @property
    def dim(self) -> int:
        return self.values.size

    def digest(self) -> str:
        return hashlib.sha256(self.values.astype("<f4").tobytes()).hexdigest()

    def cosine(self, other: "SpeakerEmbedding") -> float:
        a, b = self.values.astype(np.float64), other.values.astype(np.float64)
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def projection_matrix(n_in: int, dim: int = EMBED_DIM, seed: int = PROJECTION_SEED) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n_in, dim)) / np.sqrt(dim)).astype(np.float32)


def pooled_statistics(w: Waveform, mel: MelConfig = MelConfig()) -> np.ndarray:
    """Mean (centred across bins) and std of log-mel over active frames, ``2F`` values."""
    feats = log_mel(w, mel).frames.astype(np.float64)
    energy = np.log(np.exp(feats).sum(axis=1))
    active = feats[energy >= energy.max() - ACTIVITY_RANGE]
    mean = active.mean(axis=0)
    return np.concatenate([mean - mean.mean(), active.std(axis=0)])


def embed(enrollment: Waveform, projection: np.ndarray | None = None,
          mel: MelConfig = MelConfig(), min_duration_s: float = MIN_ENROLL_S) -> SpeakerEmbedding:
    if enrollment.duration < min_duration_s:
        raise EnrollmentError(
            f"enrollment is {enrollment.duration:.3f} s; at least {min_duration_s} s is required")
    stats = pooled_statistics(enrollment, mel)
    if projection is None:
        projection = projection_matrix(stats.size)
    if projection.shape[0] != stats.size:
        raise EnrollmentError(f"projection expects {projection.shape[0]} statistics, got {stats.size}")
    v = stats @ projection.astype(np.float64)
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0:
        raise EnrollmentError("enrollment statistics are degenerate (zero projection)")
    return SpeakerEmbedding(v / norm)


def average_embeddings(embs: list[SpeakerEmbedding]) -> SpeakerEmbedding:
    if not embs:
        raise EnrollmentError("nothing to average")
    v = np.mean([e.values.astype(np.float64) for e in embs], axis=0)
    return SpeakerEmbedding(v / np.linalg.norm(v))


def save_embedding(path, emb: SpeakerEmbedding, seed: int = PROJECTION_SEED) -> None:
    """One text header line ``dim=<E> seed=<seed>``, then little-endian float32 values."""
    with open(path, "wb") as f:
        f.write(f"dim={emb.dim} seed={seed}\n".encode())
        f.write(emb.values.astype("<f4").tobytes())


def load_embedding(path) -> tuple[SpeakerEmbedding, int]:
    raw = Path(path).read_bytes()
    head, _, blob = raw.partition(b"\n")
    try:
        fields = dict(kv.split("=") for kv in head.decode().split())
        dim, seed = int(fields["dim"]), int(fields["seed"])
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise EnrollmentError(f"{path}: bad embedding header {head[:40]!r}") from e
    values = np.frombuffer(blob, dtype="<f4")
    if values.size != dim:
        raise EnrollmentError(f"{path}: header says {dim} values, file holds {values.size}")
    return SpeakerEmbedding(values.copy()), seed
