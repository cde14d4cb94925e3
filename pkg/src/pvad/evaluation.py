"""Per-class average precision, mAP and the clean / seen / unseen scenario report."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .autodiff import softmax
from .errors import ComparabilityError, ConfigError, UndefinedMetricError
from .vad import CLASSES

SCENARIOS = ("clean", "seen", "unseen")
COLUMNS = ("ns AP", "tss AP", "ntss AP", "mAP")


_FIXED_POINT = 1 << 128


def _mean_precision(ranks: list[int]) -> float:
    """Correctly rounded ``mean(k / ranks[k-1])``.

    The sum is accumulated in 128-bit fixed point, which brackets the exact
    rational value in an interval far narrower than a float64 ulp; the exact
    ``Fraction`` sum is only needed when that interval straddles a rounding
    boundary.
    """
    n = len(ranks)
    floor_sum = sum((k * _FIXED_POINT) // r for k, r in enumerate(ranks, start=1))
    lo = Fraction(floor_sum, _FIXED_POINT * n)
    hi = Fraction(floor_sum + n, _FIXED_POINT * n)
    if float(lo) == float(hi):
        return float(lo)
    return float(sum(Fraction(k, r) for k, r in enumerate(ranks, start=1)) / n)


def average_precision(scores, positives) -> float:
    """Non-interpolated AP: mean over positives of precision at their rank.

    Ranking is by descending score; ties keep the original index order.  The
    result is the float nearest to the exact rational AP.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives).astype(bool)
    if scores.shape != pos.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and positives {pos.shape} must be equal-length vectors")
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = pos[order]
    return _mean_precision((np.flatnonzero(hits) + 1).tolist())


@dataclass
class EvalResult:
    ap: dict
    map_score: float
    scenario: str
    snr_levels: list = field(default_factory=list)
    n_frames: int = 0
    manifest_digest: str = ""

    def row(self) -> list[float]:
        return [self.ap[c] for c in CLASSES] + [self.map_score]

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "ap": self.ap, "mAP": self.map_score,
                "snr_levels": self.snr_levels, "n_frames": self.n_frames}


def _class_aps(probs: np.ndarray, labels: np.ndarray) -> dict:
    return {c: average_precision(probs[:, k], labels == k) for k, c in enumerate(CLASSES)}


def manifest_digest(examples) -> str:
    ids = sorted(e.id for e in examples)
    return hashlib.sha256("\n".join(ids).encode()).hexdigest()


def evaluate(model, examples, scenario: str, per_snr: bool = False) -> EvalResult:
    """Score every frame of ``examples`` and compute one-vs-rest AP per class.

    ``model.predict(examples)`` must return per-example ``(T, 3)`` logits.
    Noisy scenarios pool all SNR levels by default; ``per_snr`` averages the
    per-level APs instead.  Frames are ordered by example id, so manifest
    order does not matter.
    """
    examples = sorted([e for e in examples if e.scenario == scenario], key=lambda e: e.id)
    if not examples:
        raise ConfigError(f"no examples for scenario {scenario!r}")
    logits = model.predict(examples)
    probs = softmax(np.concatenate(logits).astype(np.float64))
    labels = np.concatenate([e.labels for e in examples])
    snrs = np.concatenate([np.full(e.labels.size, np.nan if e.snr_db is None else e.snr_db) for e in examples])
    levels = sorted({e.snr_db for e in examples if e.snr_db is not None})
    if per_snr and levels:
        per = [_class_aps(probs[snrs == lv], labels[snrs == lv]) for lv in levels]
        ap = {c: float(np.mean([p[c] for p in per])) for c in CLASSES}
    else:
        ap = _class_aps(probs, labels)
    return EvalResult(ap, float(np.mean([ap[c] for c in CLASSES])), scenario, levels,
                      int(labels.size), manifest_digest(examples))


@dataclass
class ReportRow:
    mode: str
    scenario: str
    mean: list
    std: list | None


def compare_modes(results: dict[str, list[dict[str, EvalResult]]]) -> list[ReportRow]:
    """Table rows (mode x scenario) of mean AP/mAP over seeds, with std for >1 seed.

    ``results[mode]`` holds one ``{scenario: EvalResult}`` per seed.
    """
    digests = {}
    for mode, runs in results.items():
        for run in runs:
            for sc, r in run.items():
                if digests.setdefault(sc, r.manifest_digest) != r.manifest_digest:
                    raise ComparabilityError(f"{mode}/{sc} was evaluated on a different manifest")
    rows = []
    for mode, runs in results.items():
        scenarios = [s for s in SCENARIOS if all(s in r for r in runs)]
        for sc in scenarios:
            vals = np.array([r[sc].row() for r in runs])
            rows.append(ReportRow(mode, sc, vals.mean(axis=0).tolist(),
                                  vals.std(axis=0).tolist() if len(runs) > 1 else None))
    return rows


def format_table(rows: list[ReportRow]) -> str:
    show_std = any(r.std is not None for r in rows)
    head = f"{'mode':<8} {'scenario':<8} " + " ".join(f"{c:>15}" if show_std else f"{c:>8}" for c in COLUMNS)
    lines = [head, "-" * len(head)]
    for r in rows:
        cells = []
        for k in range(len(COLUMNS)):
            m = 100 * r.mean[k]
            cells.append(f"{m:7.1f} ({100 * r.std[k]:4.1f})" if r.std is not None
                         else (f"{m:8.1f}" if not show_std else f"{m:15.1f}"))
        lines.append(f"{r.mode:<8} {r.scenario:<8} " + " ".join(cells))
    return "\n".join(lines)


def table_records(rows: list[ReportRow]) -> list[str]:
    out = []
    for r in rows:
        rec = {"mode": r.mode, "scenario": r.scenario, **dict(zip(COLUMNS, r.mean))}
        if r.std is not None:
            rec["std"] = dict(zip(COLUMNS, r.std))
        out.append(json.dumps(rec, sort_keys=True))
    return out
