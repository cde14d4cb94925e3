"""``pvad`` command line: synth, train, enroll, run, eval.

Exit codes: 0 success, 1 usage, 2 data/config error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .autodiff import softmax
from .checkpoint import PatchFile, file_digest, load_checkpoint, load_patch, save_checkpoint, save_patch
from .conditioning import PersonalizedVAD, hypernet_forward, personalize
from .errors import ConfigError, ModeError, PvadError
from .evaluation import SCENARIOS, compare_modes, evaluate, format_table, table_records
from .features import log_mel, read_wav
from .synth import SPLITS, CorpusConfig, build_corpus
from .training import TrainConfig, fit_corpus, load_examples
from .vad import CLASSES, apply_patch, binary_collapse

log = logging.getLogger("pvad")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def _log_config(kind: str, config: dict) -> None:
    log.info("%s config %s", kind, json.dumps(config, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    raw = _read_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = CorpusConfig.from_dict(raw)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigError(f"{out} is not empty; pass --force to overwrite")
        for name in ("wav", "enroll"):
            shutil.rmtree(out / name, ignore_errors=True)
        for name in ["header.json"] + [f"{s}.jsonl" for s in SPLITS]:
            (out / name).unlink(missing_ok=True)
    _log_config("corpus", cfg.to_dict())
    manifests = build_corpus(cfg, out)
    print(f"corpus {out} (master seed {cfg.seed})")
    for split in SPLITS:
        recs = manifests[split]
        counts = np.sum([r["label_counts"] for r in recs], axis=0)
        secs = sum(r["num_samples"] for r in recs) / 16000
        hist = " ".join(f"{c}={int(n)}" for c, n in zip(CLASSES, counts))
        print(f"{split:<6} {len(recs):5d} mixtures {secs / 60:6.1f} min  frames {hist}")
    return 0


def cmd_train(args) -> int:
    raw = _read_config(args.config)
    for key in ("seed", "mode", "init_from"):
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    cfg = TrainConfig.from_dict(raw)
    _log_config("train", cfg.to_dict())
    ckpt, report = fit_corpus(cfg, args.corpus)
    digest = save_checkpoint(args.out, ckpt)
    report.write_log(Path(str(args.out) + ".log.jsonl"))
    print(f"checkpoint {args.out} sha256 {digest}")
    print(f"best epoch {report.best_epoch} val loss {report.best_val_loss:.4f} "
          f"epochs {len(report.train_loss)} wall {report.wall_clock_s:.1f}s")
    return 0


def cmd_enroll(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    if model.mode.kind != "hywa":
        raise ModeError(f"enrollment produces weight patches; checkpoint mode is {model.mode.kind!r}")
    emb = model.embed(read_wav(args.wav))
    patch = hypernet_forward(model.cond, emb, model.vad.config)
    pf = PatchFile(patch, emb.digest(), file_digest(args.checkpoint))
    digest = save_patch(args.out, pf)
    print(f"patch {args.out} sha256 {digest} ({patch.size} values)")
    return 0


def _runner(args, ckpt) -> PersonalizedVAD:
    model = ckpt.model
    if args.patch is not None:
        if model.mode.kind != "hywa":
            raise ModeError(f"weight patches apply to hywa checkpoints, not {model.mode.kind!r}")
        pf = load_patch(args.patch, file_digest(args.checkpoint))
        return PersonalizedVAD(apply_patch(model.vad, pf.patch), patch=pf.patch)
    if args.enroll is not None:
        return model.personalize(model.embed(read_wav(args.enroll)))
    if model.mode.kind in ("none", "hywa"):
        return personalize(model.mode, model.vad, model.cond, None)
    raise ConfigError(f"mode {model.mode.kind!r} needs --enroll WAV")


def cmd_run(args) -> int:
    if args.no_patch and (args.patch or args.enroll):
        raise ConfigError("--no-patch excludes --patch and --enroll")
    ckpt = load_checkpoint(args.checkpoint)
    runner = _runner(args, ckpt)
    feats = log_mel(read_wav(args.wav), ckpt.model.mel)
    logits = runner.stream(feats) if args.stream else runner.forward(feats)
    hop_s = feats.frame_hop
    if args.collapse:
        probs = binary_collapse(logits)
        names, cols = ("ns", "speech"), "p_ns\tp_speech"
    else:
        probs = softmax(np.asarray(logits, np.float64))
        names, cols = CLASSES, "p_ns\tp_tss\tp_ntss"
    out = sys.stdout
    out.write(f"# frame\ttime_s\t{cols}\tlabel\n")
    for t, p in enumerate(probs):
        cells = "\t".join(f"{v:.6f}" for v in p)
        out.write(f"{t}\t{t * hop_s:.2f}\t{cells}\t{names[int(np.argmax(p))]}\n")
    return 0


def cmd_eval(args) -> int:
    scenarios = SCENARIOS if args.scenario == "all" else (args.scenario,)
    results = defaultdict(list)
    cache: dict = {}
    for path in args.checkpoints:
        model = load_checkpoint(path).model
        key = (model.projection.tobytes(), model.mel)
        if key not in cache:
            cache[key] = load_examples(args.corpus, "test", model.projection, model.mel)
        examples = cache[key]
        label = model.mode.kind
        if model.mode.injection_site not in (None, "features") and label != "film":
            label = f"{label}@{model.mode.injection_site}"
        results[label].append({sc: evaluate(model, examples, sc, args.per_snr) for sc in scenarios})
    rows = compare_modes(dict(results))
    print("\n".join(table_records(rows)) if args.json else format_table(rows))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pvad", description="Personalized VAD with hypernetwork weight adaptation.")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="build a synthetic multi-speaker corpus")
    s.add_argument("out", help="output directory")
    s.add_argument("--config", help="JSON object of corpus settings")
    s.add_argument("--seed", type=int, help="master seed (overrides the config)")
    s.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model on a corpus")
    s.add_argument("corpus")
    s.add_argument("out", help="checkpoint path")
    s.add_argument("--config", help="JSON object of training settings")
    s.add_argument("--seed", type=int)
    s.add_argument("--mode", choices=("none", "concat", "add", "mul", "film", "hywa"))
    s.add_argument("--init-from", dest="init_from", help="checkpoint whose trunk warm-starts training")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enroll", help="turn an enrollment recording into a weight patch")
    s.add_argument("checkpoint")
    s.add_argument("wav")
    s.add_argument("out", help="patch path")
    s.set_defaults(func=cmd_enroll)

    s = sub.add_parser("run", help="per-frame class probabilities for one recording")
    s.add_argument("checkpoint")
    s.add_argument("wav")
    s.add_argument("--patch", help="weight patch from `pvad enroll`")
    s.add_argument("--enroll", help="enrollment wav, embedded on the fly")
    s.add_argument("--no-patch", action="store_true", help="run the unpersonalized trunk")
    s.add_argument("--stream", action="store_true", help="frame-by-frame inference")
    s.add_argument("--collapse", action="store_true", help="print ns/speech instead of three classes")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval", help="AP table over the test split")
    s.add_argument("corpus")
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--scenario", choices=("all",) + SCENARIOS, default="all")
    s.add_argument("--per-snr", action="store_true", help="average per-SNR APs instead of pooling")
    s.add_argument("--json", action="store_true", help="one JSON record per row")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except PvadError as e:
        print(f"pvad {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"pvad {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
