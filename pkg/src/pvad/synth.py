"""Synthetic multi-speaker corpora with exact ternary frame labels.

Speech is a formant-filtered glottal source (sawtooth at a drifting pitch)
cut into syllables separated by pauses.  All segment boundaries sit on the
10 ms hop grid, so the voiced mask is exact by construction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ConfigError, PowerUndefinedError
from .features import MelConfig, Waveform, num_frames, write_wav
from .vad import NS, NTSS, TSS

SNR_GRID = (-5, 0, 5, 10, 15, 20)
SR = 16000
HOP = 160
CORPUS_FORMAT = "pvad-corpus-1"


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    f0: float
    formant_profile: tuple
    seed: int
    tilt: float = 0.0          # one-pole source low-pass coefficient
    breathiness: float = 0.02  # aspiration noise relative to the source

    def to_dict(self) -> dict:
        d = asdict(self)
        d["formant_profile"] = list(self.formant_profile)
        return d


@dataclass
class Span:
    start: int
    end: int
    speaker: str
    target: bool
    voiced: list            # [[start, end), ...] in mixture samples

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "speaker": self.speaker,
                "target": self.target, "voiced": [list(v) for v in self.voiced]}

    @classmethod
    def from_dict(cls, d: dict) -> "Span":
        return cls(d["start"], d["end"], d["speaker"], d["target"], [list(v) for v in d["voiced"]])


@dataclass
class MixtureExample:
    waveform: Waveform
    labels: np.ndarray
    target_speaker_id: str
    spans: list
    noise_id: str | None = None
    snr_db: float | None = None
    noise_gain: float | None = None
    noise_offset: int | None = None


@dataclass
class NoiseBank:
    split: str
    clips: list
    seed: int
    ids: list = field(default_factory=list)


def make_speakers(n: int, seed: int, prefix: str = "spk", start: int = 0) -> list[SyntheticSpeaker]:
    """Speakers spread over pitch (85-260 Hz), vocal-tract scale (0.72-1.4) and spectral tilt.

    Each trait is stratified (one draw per 1/n slice, independently permuted)
    so that even a two-speaker set contains clearly different voices.
    """
    rng = np.random.default_rng([seed, 7, start])
    lo, hi = np.log(85.0), np.log(260.0)
    slots = [rng.permutation(n) for _ in range(3)]
    out = []
    for i in range(n):
        u = [(slots[k][i] + rng.uniform(0.15, 0.85)) / n for k in range(3)]
        f0 = float(np.exp(lo + u[0] * (hi - lo)))
        tract = 0.72 + 0.68 * u[1]
        formants = tuple(float(f * tract * rng.uniform(0.97, 1.03)) for f in (520.0, 1480.0, 2500.0))
        out.append(SyntheticSpeaker(f"{prefix}{start + i:03d}", round(f0, 3),
                                    tuple(round(f, 2) for f in formants), int(rng.integers(2**31)),
                                    round(float(0.75 * u[2]), 4), round(float(rng.uniform(0.01, 0.08)), 4)))
    return out


def _resonator(x: np.ndarray, freq: float, bw: float) -> np.ndarray:
    r = np.exp(-np.pi * bw / SR)
    theta = 2 * np.pi * freq / SR
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return signal.lfilter([1.0 - r], a, x)


def _syllable(spk: SyntheticSpeaker, n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SR
    drift = rng.uniform(-0.08, 0.08)
    f0 = spk.f0 * (1 + drift * t / max(t[-1], 1e-3)) * (1 + 0.01 * np.sin(2 * np.pi * 5.5 * t))
    phase = 2 * np.pi * np.cumsum(f0) / SR + rng.uniform(0, 2 * np.pi)
    src = signal.sawtooth(phase) + spk.breathiness * 4 * rng.standard_normal(n)
    y = signal.lfilter([1.0 - spk.tilt], [1.0, -spk.tilt], src)
    for k, (fc, bw) in enumerate(zip(spk.formant_profile, (90.0, 120.0, 170.0))):
        y = _resonator(y, fc * rng.uniform(0.94, 1.06), bw) * (1.0 if k == 0 else 0.6)
    ramp = min(n // 4, int(0.02 * SR))
    env = np.ones(n)
    if ramp:
        w = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = w
        env[-ramp:] = w[::-1]
    return y * env


def synth_utterance(spk: SyntheticSpeaker, duration_s: float, seed: int,
                    pauses: bool = True, level_rms: float = 0.08):
    """Return ``(Waveform, voiced_mask)``; one mask entry per 10 ms hop."""
    if not 0.5 <= duration_s <= 10.0:
        raise ConfigError(f"utterance duration {duration_s} s outside [0.5, 10]")
    rng = np.random.default_rng([spk.seed, seed])
    hops = int(round(duration_s * SR / HOP))
    n = hops * HOP
    mask = np.zeros(hops, dtype=bool)
    x = np.zeros(n)
    pos = 0
    while pos < hops:
        length = hops - pos if not pauses else int(rng.integers(12, 36))
        length = min(length, hops - pos)
        if length >= 3:
            x[pos * HOP:(pos + length) * HOP] = _syllable(spk, length * HOP, rng)
            mask[pos:pos + length] = True
        pos += length
        if pauses:
            pos += int(rng.integers(5, 26))
    rms = np.sqrt(np.mean(x[np.repeat(mask, HOP)] ** 2)) if mask.any() else 0.0
    if rms > 0:
        x *= level_rms / rms
    return Waveform(x, SR), mask


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    m = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(m)
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def frame_centers(n_samples: int, mel: MelConfig = MelConfig()) -> np.ndarray:
    T = num_frames(n_samples, mel.window, mel.hop)
    return np.arange(T) * mel.hop + mel.window // 2


def labels_from_spans(spans: list, n_samples: int, mel: MelConfig = MelConfig()) -> np.ndarray:
    """Frame labels from span bookkeeping, decided at each frame's center sample."""
    track = np.full(n_samples, NS, dtype=np.int8)
    for sp in spans:
        for a, b in sp.voiced:
            track[a:b] = TSS if sp.target else NTSS
    return track[frame_centers(n_samples, mel)]


def labels_digest(labels: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(labels, np.uint8).tobytes()).hexdigest()


def make_mixture(utterances: list, target_index: int, seed: int,
                 max_gap_s: float = 0.3, mel: MelConfig = MelConfig()) -> MixtureExample:
    """Concatenate 1-3 ``(Waveform, mask, speaker_id)`` utterances with random silent gaps."""
    if not utterances:
        raise ConfigError("a mixture needs at least one utterance")
    if len(utterances) > 3:
        raise ConfigError(f"at most 3 utterances per mixture, got {len(utterances)}")
    if not 0 <= target_index < len(utterances):
        raise ConfigError(f"target index {target_index} out of range")
    rng = np.random.default_rng([seed, 11])
    max_gap = int(round(max_gap_s * SR / HOP))
    pieces, spans, pos = [], [], 0
    for k, (wav, mask, spk_id) in enumerate(utterances):
        if k > 0 and max_gap > 0:
            gap = int(rng.integers(0, max_gap + 1)) * HOP
            pieces.append(np.zeros(gap))
            pos += gap
        n = len(wav)
        voiced = [[int(pos + a * HOP), int(pos + min(b * HOP, n))] for a, b in _runs(np.asarray(mask, bool))]
        spans.append(Span(pos, pos + n, spk_id, k == target_index, voiced))
        pieces.append(wav.samples)
        pos += n
    x = np.concatenate(pieces)
    target = utterances[target_index][2]
    return MixtureExample(Waveform(x, SR), labels_from_spans(spans, x.size, mel), target, spans)


# ---------------------------------------------------------------------------
# noise


def _seen_clip(rng, n) -> np.ndarray:
    """Filtered-noise textures: band-passed, pink-ish or brown-ish noise with slow AM."""
    kind = rng.integers(3)
    w = rng.standard_normal(n)
    if kind == 0:
        lo = rng.uniform(100, 2500)
        hi = min(lo * rng.uniform(1.5, 4.0), 7800)
        b, a = signal.butter(2, [lo, hi], btype="band", fs=SR)
        x = signal.lfilter(b, a, w)
    elif kind == 1:
        x = signal.lfilter([1.0], [1.0, -0.97], w)
    else:
        x = signal.lfilter([1.0], [1.0, -0.7], w)
    am = 1 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.1, 1.5) * np.arange(n) / SR + rng.uniform(0, 6))
    return x * am


def _unseen_clip(rng, n) -> np.ndarray:
    """Tonal / impulsive textures: AM tone clusters plus decaying clicks."""
    t = np.arange(n) / SR
    x = np.zeros(n)
    for _ in range(int(rng.integers(2, 6))):
        f = rng.uniform(300, 4000)
        x += np.sin(2 * np.pi * f * t + rng.uniform(0, 6)) * (1 + 0.8 * np.sin(2 * np.pi * rng.uniform(0.5, 4) * t))
    clicks = np.zeros(n)
    for pos in rng.integers(0, n, size=int(rng.integers(5, 20))):
        clicks[pos] = rng.uniform(-8, 8)
    decay = np.exp(-np.arange(int(0.03 * SR)) / (0.004 * SR))
    return x + np.convolve(clicks, decay)[:n]


def make_noise_bank(split: str, n_clips: int = 4, seed: int = 0, duration_s: float = 4.0) -> NoiseBank:
    if split not in ("seen", "unseen"):
        raise ConfigError(f"noise bank split must be 'seen' or 'unseen', got {split!r}")
    rng = np.random.default_rng([seed, 0 if split == "seen" else 1, 99])
    n = int(duration_s * SR)
    gen = _seen_clip if split == "seen" else _unseen_clip
    clips, ids = [], []
    for i in range(n_clips):
        c = gen(rng, n)
        clips.append(Waveform(c / np.max(np.abs(c)) * 0.5, SR))
        ids.append(f"{split}-{i:02d}")
    return NoiseBank(split, clips, seed, ids)


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


def noise_gain(p_speech: float, p_noise: float, snr_db: float) -> float:
    """Gain making ``10 log10(p_speech / (g^2 p_noise)) == snr_db``."""
    if p_speech <= 0:
        raise PowerUndefinedError("speech power is zero; SNR is undefined")
    if p_noise <= 0:
        raise PowerUndefinedError("noise power is zero; SNR is undefined")
    return float(np.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0))))


def add_noise(x: MixtureExample, bank: NoiseBank, snr_db: float, seed: int,
              allow_off_grid: bool = False) -> MixtureExample:
    """Mix a tiled/cropped noise clip at ``snr_db`` over the whole signal; labels are kept."""
    if not allow_off_grid and snr_db not in SNR_GRID:
        raise ConfigError(f"SNR {snr_db} dB not on grid {SNR_GRID}")
    s = x.waveform.samples
    p_s = power(s)
    if p_s <= 0:
        raise PowerUndefinedError("speech segment is all zeros; SNR is undefined")
    rng = np.random.default_rng([seed, 23])
    k = int(rng.integers(len(bank.clips)))
    clip = bank.clips[k].samples
    offset = int(rng.integers(clip.size))
    reps = -(-(s.size + offset) // clip.size)
    noise = np.tile(clip, reps)[offset:offset + s.size]
    g = noise_gain(p_s, power(noise), snr_db)
    return MixtureExample(Waveform(s + g * noise, SR), x.labels.copy(), x.target_speaker_id,
                          x.spans, bank.ids[k], float(snr_db), g, offset)


def synth_rir(rt60: float, seed: int, length_s: float = 0.3) -> np.ndarray:
    """Exponentially decaying noise tail with a unit direct path."""
    rng = np.random.default_rng([seed, 31])
    n = int(length_s * SR)
    h = rng.standard_normal(n) * np.exp(-6.9 * np.arange(n) / (rt60 * SR)) * 0.3
    h[0] = 1.0
    return h


def apply_reverb(x: MixtureExample, rt60: float, seed: int) -> MixtureExample:
    y = signal.fftconvolve(x.waveform.samples, synth_rir(rt60, seed))[:len(x.waveform)]
    y *= np.sqrt(power(x.waveform.samples) / max(power(y), 1e-20))
    return MixtureExample(Waveform(y, SR), x.labels.copy(), x.target_speaker_id, x.spans)


# ---------------------------------------------------------------------------
# corpus


@dataclass
class CorpusConfig:
    seed: int = 0
    n_train_speakers: int = 8
    n_valid_speakers: int = 2
    n_test_speakers: int = 2
    train_examples: int = 160
    valid_examples: int = 24
    test_examples: int = 20
    utterance_s: tuple = (1.0, 3.0)
    max_gap_s: float = 0.3
    enroll_s: float = 2.0
    enroll_per_speaker: int = 3
    snr_grid: tuple = SNR_GRID
    train_noise_prob: float = 0.5
    noise_clips: int = 4
    noise_clip_s: float = 4.0
    reverb_prob: float = 0.0
    reverb_rt60: tuple = (0.2, 0.6)
    speaker_assignment: dict | None = None   # split -> indices into the speaker pool

    def __post_init__(self):
        self.utterance_s = tuple(self.utterance_s)
        self.snr_grid = tuple(self.snr_grid)
        self.reverb_rt60 = tuple(self.reverb_rt60)
        for name in ("n_train_speakers", "n_valid_speakers", "n_test_speakers"):
            if getattr(self, name) < 2:
                raise ConfigError(f"{name} must be >= 2")
        for name in ("train_examples", "valid_examples", "test_examples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown corpus config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("utterance_s", "snr_grid", "reverb_rt60"):
            d[k] = list(d[k])
        return d


SPLITS = ("train", "valid", "test")


def assign_speakers(cfg: CorpusConfig) -> dict[str, list[SyntheticSpeaker]]:
    """Disjoint speaker sets per split.

    The pool is the concatenation of one stratified draw per split (train,
    valid, test).  ``speaker_assignment`` may re-map pool indices to splits.
    """
    counts = {"train": cfg.n_train_speakers, "valid": cfg.n_valid_speakers, "test": cfg.n_test_speakers}
    pool, start = [], 0
    for split in SPLITS:
        pool += make_speakers(counts[split], cfg.seed, start=start)
        start += counts[split]
    if cfg.speaker_assignment is None:
        out, pos = {}, 0
        for split in SPLITS:
            out[split] = pool[pos:pos + counts[split]]
            pos += counts[split]
        return out
    seen: dict[int, str] = {}
    out = {}
    for split in SPLITS:
        idx = list(cfg.speaker_assignment.get(split, []))
        if len(idx) != counts[split]:
            raise ConfigError(f"{split}: {len(idx)} speakers assigned, {counts[split]} configured")
        for i in idx:
            if i in seen:
                raise ConfigError(f"speaker {i} assigned to both {seen[i]} and {split}")
            if not 0 <= i < len(pool):
                raise ConfigError(f"speaker index {i} outside pool of {len(pool)}")
            seen[i] = split
        out[split] = [pool[i] for i in idx]
    return out


def _child_seed(master: int, split: str, index: int, salt: int = 0) -> int:
    ss = np.random.SeedSequence([master, SPLITS.index(split) if split in SPLITS else 9, index, salt])
    return int(ss.generate_state(1)[0])


def _enroll_path(spk: SyntheticSpeaker, k: int) -> str:
    return f"enroll/{spk.speaker_id}_{k}.wav"


def example_mixture(cfg: CorpusConfig, split: str, index: int, speakers: list) -> tuple[MixtureExample, int]:
    """The clean mixture for example ``index`` of ``split`` and its enrollment choice."""
    seed = _child_seed(cfg.seed, split, index)
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, min(3, len(speakers)) + 1))
    chosen = rng.choice(len(speakers), size=k, replace=False)
    target = int(rng.integers(k))
    utts = []
    for j, si in enumerate(chosen):
        spk = speakers[int(si)]
        dur = float(rng.uniform(*cfg.utterance_s))
        wav, mask = synth_utterance(spk, dur, int(rng.integers(2**31)))
        utts.append((wav, mask, spk.speaker_id))
    mix = make_mixture(utts, target, int(rng.integers(2**31)), cfg.max_gap_s)
    enroll = int(rng.integers(cfg.enroll_per_speaker)) if split == "train" else 0
    return mix, enroll


def _record(rid: str, split: str, path: str, ex: MixtureExample, enrollment: str,
            scenario: str, source: str | None = None) -> dict:
    return {
        "id": rid, "split": split, "path": path, "scenario": scenario, "source": source,
        "snr_db": ex.snr_db, "noise_id": ex.noise_id, "noise_gain": ex.noise_gain,
        "noise_offset": ex.noise_offset, "target_speaker": ex.target_speaker_id,
        "enrollment": enrollment, "num_samples": len(ex.waveform), "num_frames": int(ex.labels.size),
        "spans": [s.to_dict() for s in ex.spans], "labels_sha256": labels_digest(ex.labels),
        "label_counts": np.bincount(ex.labels, minlength=3).tolist(),
    }


def build_corpus(cfg: CorpusConfig, out_dir=None) -> dict[str, list[dict]]:
    """Synthesize train/valid/test manifests (and audio files when ``out_dir`` is given).

    Train and valid mixtures get seen-bank noise with probability
    ``train_noise_prob``; every test mixture is emitted clean and at each grid
    SNR with both the seen and the unseen bank.
    """
    speakers = assign_speakers(cfg)
    seen = make_noise_bank("seen", cfg.noise_clips, cfg.seed, cfg.noise_clip_s)
    unseen = make_noise_bank("unseen", cfg.noise_clips, cfg.seed, cfg.noise_clip_s)
    out = Path(out_dir) if out_dir is not None else None
    manifests: dict[str, list[dict]] = {s: [] for s in SPLITS}

    def emit(path: str, wav: Waveform):
        if out is not None:
            write_wav(out / path, wav)

    for split in SPLITS:
        for spk in speakers[split]:
            n_enroll = cfg.enroll_per_speaker if split == "train" else 1
            for k in range(n_enroll):
                wav, _ = synth_utterance(spk, cfg.enroll_s, _child_seed(cfg.seed, "enroll", k, spk.seed))
                emit(_enroll_path(spk, k), wav)
        n_ex = {"train": cfg.train_examples, "valid": cfg.valid_examples, "test": cfg.test_examples}[split]
        for i in range(n_ex):
            mix, enroll_k = example_mixture(cfg, split, i, speakers[split])
            spk = next(s for s in speakers[split] if s.speaker_id == mix.target_speaker_id)
            enroll = _enroll_path(spk, enroll_k)
            rid = f"{split}-{i:05d}"
            if split != "test":
                rng = np.random.default_rng(_child_seed(cfg.seed, split, i, 1))
                if cfg.reverb_prob > 0 and rng.random() < cfg.reverb_prob:
                    mix = apply_reverb(mix, float(rng.uniform(*cfg.reverb_rt60)), int(rng.integers(2**31)))
                scenario = "clean"
                if rng.random() < cfg.train_noise_prob:
                    snr = cfg.snr_grid[int(rng.integers(len(cfg.snr_grid)))]
                    mix = add_noise(mix, seen, snr, int(rng.integers(2**31)), allow_off_grid=True)
                    scenario = "seen"
                path = f"wav/{split}/{rid}.wav"
                emit(path, mix.waveform)
                manifests[split].append(_record(rid, split, path, mix, enroll, scenario))
                continue
            path = f"wav/test/{rid}.wav"
            emit(path, mix.waveform)
            manifests[split].append(_record(rid, split, path, mix, enroll, "clean"))
            for bank in (seen, unseen):
                for j, snr in enumerate(cfg.snr_grid):
                    noisy = add_noise(mix, bank, snr, _child_seed(cfg.seed, split, i, 100 + j + 50 * (bank is unseen)),
                                      allow_off_grid=True)
                    vid = f"{rid}-{bank.split}-{snr:+d}dB" if float(snr).is_integer() else f"{rid}-{bank.split}-{snr}dB"
                    vpath = f"wav/test/{vid}.wav"
                    emit(vpath, noisy.waveform)
                    manifests[split].append(_record(vid, split, vpath, noisy, enroll, bank.split, rid))

    if out is not None:
        header = {
            "format": CORPUS_FORMAT, "master_seed": cfg.seed, "config": cfg.to_dict(),
            "speakers": {s: [spk.to_dict() for spk in speakers[s]] for s in SPLITS},
            "noise_banks": {"seen": seen.ids, "unseen": unseen.ids},
        }
        (out / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
        for split in SPLITS:
            with open(out / f"{split}.jsonl", "w") as f:
                for rec in manifests[split]:
                    f.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifests


def read_manifest(corpus_dir, split: str) -> list[dict]:
    path = Path(corpus_dir) / f"{split}.jsonl"
    if not path.exists():
        raise ConfigError(f"missing manifest {path}")
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def read_header(corpus_dir) -> dict:
    path = Path(corpus_dir) / "header.json"
    if not path.exists():
        raise ConfigError(f"missing corpus header {path}")
    header = json.loads(path.read_text())
    if header.get("format") != CORPUS_FORMAT:
        raise ConfigError(f"{path}: unsupported corpus format {header.get('format')!r}")
    return header


def record_labels(rec: dict, mel: MelConfig = MelConfig()) -> np.ndarray:
    """Recompute frame labels from a manifest record and verify its digest."""
    labels = labels_from_spans([Span.from_dict(s) for s in rec["spans"]], rec["num_samples"], mel)
    if labels_digest(labels) != rec["labels_sha256"]:
        raise ConfigError(f"{rec['id']}: labels recomputed from spans do not match the stored digest")
    return labels
