"""Acceptance suite: one test per criterion, summarised as PASS/FAIL lines at the end of the run.

The first docstring line of each test names its criterion; ``acceptance_detail``
carries the measured numbers.
"""

import itertools
import json
import time
from fractions import Fraction

import numpy as np
import pytest

from pvad import evaluation, synth, training, vad
from pvad.checkpoint import load_checkpoint, save_checkpoint
from pvad.cli import main
from pvad.conditioning import (ConditioningMode, HyperNetConfig, hypernet_param_count, init_conditioning,
                               personalize, set_embed_norm, vad_config_for)
from pvad.embed import projection_matrix
from pvad.features import read_wav
from pvad.vad import StreamState, VadConfig, apply_patch, forward, init_params, step, zero_patch

from conftest import toy_gradient_error

PERSONALIZED = ("concat", "add", "mul", "film", "hywa")

# toy ordinal experiment: full-size models, default corpus, three seeds
TOY_SEEDS = (0, 1, 2)
TOY_TRAIN = dict(max_epochs=16, patience=16)
TOY_CORPUS_SEED = 0


def brute_force_ap(scores, positives) -> Fraction:
    """Walk the ranked list; at each recall step add precision times the recall gained."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(positives)
    tp, area = 0, Fraction(0)
    for rank, i in enumerate(order, start=1):
        if positives[i]:
            tp += 1
            area += Fraction(tp, rank) * Fraction(1, n_pos)
    return area


def test_gradient_correctness(request):
    """Gradient correctness: composed-loss gradients vs central differences, 5 modes x 100 seeds"""
    t0 = time.perf_counter()
    worst = {kind: max(toy_gradient_error(kind, seed, h=1e-3) for seed in range(100)) for kind in PERSONALIZED}
    elapsed = time.perf_counter() - t0
    request.node.acceptance_detail = (", ".join(f"{k} {v:.1e}" for k, v in worst.items())
                                      + f" (max rel err); {elapsed:.1f}s")
    assert max(worst.values()) < 1e-3
    assert elapsed < 120


def test_zero_patch_identity(request):
    """Zero-patch identity: apply_patch(w, 0) bit-identical; HyWA at init equals the base VAD on 1,000 inputs"""
    w = init_params(VadConfig(), seed=0)
    rng = np.random.default_rng(0)
    w = vad.set_input_norm(w, rng.normal(-4, 3, (500, 40)))
    assert apply_patch(w, zero_patch(w)).values.tobytes() == w.values.tobytes()
    mode = ConditioningMode("hywa")
    cond = set_embed_norm(init_conditioning(mode, w.config, seed=0), rng.standard_normal((16, 64)))
    max_diff = 0.0
    for _ in range(1000):
        x = rng.normal(-4, 3, (int(rng.integers(1, 40)), 40)).astype(np.float32)
        s = rng.standard_normal(64).astype(np.float32)
        diff = np.abs(personalize(mode, w, cond, s).forward(x) - forward(w, x)).max()
        max_diff = max(max_diff, float(diff))
    request.node.acceptance_detail = f"max abs logit diff {max_diff}"
    assert max_diff == 0.0


def _trained_like(kind: str, seed: int):
    """Full-size float32 parameters pushed away from init, as after training."""
    mode = ConditioningMode(kind)
    vcfg = vad_config_for(mode, VadConfig())
    rng = np.random.default_rng([seed, 5])
    w = init_params(vcfg, seed)
    w.values[:] += (rng.standard_normal(w.size) * 0.08).astype(np.float32)
    w = vad.set_input_norm(w, rng.normal(-4, 3, (500, 40)))
    cond = init_conditioning(mode, vcfg, seed=seed)
    cond.values[:] += (rng.standard_normal(cond.size) * 0.05).astype(np.float32)
    if mode.personalized:
        cond = set_embed_norm(cond, rng.standard_normal((16, 64)))
    return mode, w, cond


def test_streaming_equivalence(request):
    """Streaming equivalence: step-composed vs batch logits within 1e-5 on 10,000-frame sequences"""
    rng = np.random.default_rng(1)
    diffs = {}
    for kind in ("none",) + PERSONALIZED:
        mode, w, cond = _trained_like(kind, seed=len(diffs))
        s = rng.standard_normal(64).astype(np.float32) if mode.personalized else None
        pv = personalize(mode, w, cond, s)
        x = rng.normal(-4, 3, (10_000, 40)).astype(np.float32)
        diffs[kind] = float(np.abs(pv.stream(x) - pv.forward(x)).max())
    # the bare step API on the plain trunk as well
    mode, w, _ = _trained_like("none", seed=9)
    x = rng.normal(-4, 3, (10_000, 40)).astype(np.float32)
    state, rows = StreamState.zeros(w.config), []
    for frame in x:
        logits, state = step(w, frame, state)
        rows.append(logits)
    diffs["step"] = float(np.abs(np.array(rows) - forward(w, x)).max())
    request.node.acceptance_detail = ", ".join(f"{k} {v:.1e}" for k, v in diffs.items())
    assert max(diffs.values()) <= 1e-5


def test_parameter_budgets(request):
    """Parameter budgets: trunk in 85k +/- 10%, hypernetwork in 3.6M +/- 15%, from layout sums"""
    w = init_params(VadConfig(), seed=0)
    trunk = sum(e.size for e in w.layout)
    learned = sum(e.size for e in w.layout if not e.name.startswith(vad.FROZEN_PREFIXES))
    cond = init_conditioning(ConditioningMode("hywa"), w.config, HyperNetConfig(), seed=0)
    hyper = sum(e.size for e in cond.layout if e.name.startswith("hyper."))
    assert hyper == hypernet_param_count(HyperNetConfig(), w.config)
    request.node.acceptance_detail = f"trunk {trunk} ({learned} learned), hypernetwork {hyper}"
    assert 85_000 * 0.9 <= learned <= trunk <= 85_000 * 1.1
    assert 3_600_000 * 0.85 <= hyper <= 3_600_000 * 1.15


def test_ap_oracle_equivalence(request):
    """AP oracle equivalence: exact match with a brute-force P/R walk, every pattern up to length 12"""
    rng = np.random.default_rng(0)
    checked = mismatches = 0
    for n in range(1, 13):
        score_sets = [rng.permutation(n).astype(float), rng.integers(0, 3, n).astype(float)]
        for scores in score_sets:
            for pattern in itertools.product((0, 1), repeat=n):
                if not any(pattern):
                    continue
                checked += 1
                want = float(brute_force_ap(scores.tolist(), pattern))
                mismatches += evaluation.average_precision(scores, pattern) != want
    request.node.acceptance_detail = f"{checked} inputs (distinct and tied scores), {mismatches} mismatches"
    assert mismatches == 0


# ---------------------------------------------------------------------------
# the toy corpus is shared by the ordinal experiment and the dataset contracts


@pytest.fixture(scope="module")
def toy_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_corpus")
    t0 = time.perf_counter()
    synth.build_corpus(synth.CorpusConfig(seed=TOY_CORPUS_SEED), out)
    return out, time.perf_counter() - t0


@pytest.mark.slow
def test_toy_ordinal_reproduction(request, toy_corpus):
    """Toy ordinal reproduction: HyWA mean mAP >= concat in every scenario; every mode >= 0.75 clean"""
    corpus, synth_s = toy_corpus
    t0 = time.perf_counter()
    proj = projection_matrix(80)
    cache = {}
    data = {s: training.load_examples(corpus, s, proj, cache=cache) for s in synth.SPLITS}
    results = {}
    for kind in PERSONALIZED:
        for seed in TOY_SEEDS:
            cfg = training.TrainConfig(mode=kind, seed=seed, **TOY_TRAIN)
            ckpt, _ = training.fit(cfg, data["train"], data["valid"])
            for sc in evaluation.SCENARIOS:
                results.setdefault((kind, sc), []).append(
                    evaluation.evaluate(ckpt.model, data["test"], sc).map_score)
    elapsed = synth_s + time.perf_counter() - t0
    means = {k: float(np.mean(v)) for k, v in results.items()}
    table = " | ".join(f"{kind}: " + "/".join(f"{means[kind, sc]:.3f}" for sc in evaluation.SCENARIOS)
                       for kind in PERSONALIZED)
    request.node.acceptance_detail = f"mean mAP clean/seen/unseen {table}; {elapsed / 60:.1f} min"
    print(json.dumps({f"{k}/{sc}": v for (k, sc), v in results.items()}))
    failures = [sc for sc in evaluation.SCENARIOS if means["hywa", sc] < means["concat", sc]]
    failures += [f"{kind} clean" for kind in PERSONALIZED if means[kind, "clean"] < 0.75]
    assert not failures, failures


def test_checkpoint_patch_round_trip(request, tiny_checkpoints, tiny_examples, tiny_corpus, tmp_path):
    """Checkpoint/patch round trip: save-load-forward bit-identical; patches regenerate byte-identically"""
    identical = []
    for kind, path in tiny_checkpoints.items():
        ckpt = load_checkpoint(path)
        copy = tmp_path / f"{kind}.again"
        save_checkpoint(copy, ckpt)
        again = load_checkpoint(copy)
        assert copy.read_bytes() == path.read_bytes()
        identical += [a.tobytes() == b.tobytes() for a, b in
                      zip(ckpt.model.predict(tiny_examples["test"]), again.model.predict(tiny_examples["test"]))]
    wav = sorted((tiny_corpus / "enroll").glob("*.wav"))[0]
    hywa = str(tiny_checkpoints["hywa"])
    assert main(["-q", "enroll", hywa, str(wav), str(tmp_path / "a.patch")]) == 0
    assert main(["-q", "enroll", hywa, str(wav), str(tmp_path / "b.patch")]) == 0
    same_patch = (tmp_path / "a.patch").read_bytes() == (tmp_path / "b.patch").read_bytes()
    request.node.acceptance_detail = (f"{sum(identical)}/{len(identical)} forwards bit-identical "
                                      f"over {len(tiny_checkpoints)} modes; patch bytes identical: {same_patch}")
    assert all(identical) and same_patch


def test_dataset_contracts(request, toy_corpus):
    """Dataset contracts: post-mix SNR within 0.01 dB, disjoint speaker splits, labels recomputable from spans"""
    corpus, _ = toy_corpus
    header = synth.read_header(corpus)
    cfg = synth.CorpusConfig.from_dict(header["config"])
    speakers = {s: {d["speaker_id"] for d in header["speakers"][s]} for s in synth.SPLITS}
    disjoint = all(not (speakers[a] & speakers[b]) for a, b in itertools.combinations(synth.SPLITS, 2))
    by_split = {s: synth.read_manifest(corpus, s) for s in synth.SPLITS}
    for split, recs in by_split.items():
        assert {r["target_speaker"] for r in recs} <= speakers[split]

    label_mismatches = frames = 0
    for recs in by_split.values():
        for rec in recs:
            labels = synth.labels_from_spans([synth.Span.from_dict(s) for s in rec["spans"]], rec["num_samples"])
            frames += labels.size
            label_mismatches += synth.labels_digest(labels) != rec["labels_sha256"]
            label_mismatches += np.bincount(labels, minlength=3).tolist() != rec["label_counts"]

    def snr(clean, noisy):
        return 10 * np.log10(np.mean(clean.astype(np.float64) ** 2) / np.mean((noisy - clean.astype(np.float64)) ** 2))

    errors = []
    clean_test = {r["id"]: r for r in by_split["test"] if r["scenario"] == "clean"}
    for rec in by_split["test"]:
        if rec["scenario"] != "clean":
            clean = read_wav(corpus / clean_test[rec["source"]]["path"]).samples
            errors.append(abs(snr(clean, read_wav(corpus / rec["path"]).samples) - rec["snr_db"]))
    for split in ("train", "valid"):
        assigned = synth.assign_speakers(cfg)[split]
        for i, rec in enumerate(by_split[split]):
            if rec["scenario"] == "seen":
                clean, _ = synth.example_mixture(cfg, split, i, assigned)
                noisy = read_wav(corpus / rec["path"]).samples
                errors.append(abs(snr(clean.waveform.samples, noisy) - rec["snr_db"]))
    request.node.acceptance_detail = (f"{len(errors)} noisy mixtures, max SNR error {max(errors):.2e} dB; "
                                      f"splits disjoint: {disjoint}; {label_mismatches} label mismatches "
                                      f"over {frames} frames")
    assert disjoint and label_mismatches == 0 and max(errors) < 0.01
