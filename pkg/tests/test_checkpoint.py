import numpy as np
import pytest

from pvad.checkpoint import (CHECKPOINT_MAGIC, PatchFile, checkpoint_bytes, file_digest, load_checkpoint,
                             load_patch, patch_bytes, save_checkpoint, save_patch)
from pvad.conditioning import hypernet_forward
from pvad.errors import CompatibilityError, CorruptionError
from pvad.features import read_wav
from pvad.vad import split_patch


@pytest.mark.parametrize("mode", ["none", "concat", "film", "hywa"])
def test_round_trip_forward_is_bit_identical(tiny_checkpoints, tiny_examples, mode):
    ckpt = load_checkpoint(tiny_checkpoints[mode])
    again = load_checkpoint(tiny_checkpoints[mode])
    ex = tiny_examples["test"][:2]
    for a, b in zip(ckpt.model.predict(ex), again.model.predict(ex)):
        assert a.tobytes() == b.tobytes()
    assert checkpoint_bytes(ckpt) == tiny_checkpoints[mode].read_bytes()


def test_saved_model_equals_in_memory_model(tiny_examples, tmp_path):
    from pvad.training import TrainConfig, fit

    ckpt, _ = fit(TrainConfig(mode="mul", max_epochs=1), tiny_examples["train"], tiny_examples["valid"])
    save_checkpoint(tmp_path / "m.ckpt", ckpt)
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    ex = tiny_examples["valid"]
    for a, b in zip(ckpt.model.predict(ex), loaded.model.predict(ex)):
        assert a.tobytes() == b.tobytes()
    assert loaded.config == ckpt.config and loaded.mode == ckpt.mode


def test_corruption_is_detected(tiny_checkpoints, tmp_path):
    raw = bytearray(tiny_checkpoints["add"].read_bytes())
    raw[-10] ^= 0xFF
    bad = tmp_path / "flipped.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        load_checkpoint(bad)
    bad.write_bytes(b"NOPE\n{}\n")
    with pytest.raises(CorruptionError):
        load_checkpoint(bad)
    bad.write_bytes(bytes(raw[:-100]))
    with pytest.raises(CorruptionError):
        load_checkpoint(bad)
    assert bytes(raw).startswith(CHECKPOINT_MAGIC + b"\n")


def _enroll(ckpt_path, wav_path) -> PatchFile:
    model = load_checkpoint(ckpt_path).model
    emb = model.embed(read_wav(wav_path))
    return PatchFile(hypernet_forward(model.cond, emb, model.vad.config), emb.digest(), file_digest(ckpt_path))


def test_patches_regenerate_byte_identically(tiny_checkpoints, tiny_corpus, tmp_path):
    wav = sorted((tiny_corpus / "enroll").rglob("*.wav"))[0]
    a = save_patch(tmp_path / "a.patch", _enroll(tiny_checkpoints["hywa"], wav))
    b = save_patch(tmp_path / "b.patch", _enroll(tiny_checkpoints["hywa"], wav))
    assert a == b
    assert (tmp_path / "a.patch").read_bytes() == (tmp_path / "b.patch").read_bytes()


def test_patch_round_trip_and_binding(tiny_checkpoints, tmp_path):
    ckpt = load_checkpoint(tiny_checkpoints["hywa"])
    flat = np.random.default_rng(0).standard_normal(8_515).astype(np.float32)
    pf = PatchFile(split_patch(flat, ckpt.model.vad.config), "e" * 64, file_digest(tiny_checkpoints["hywa"]))
    save_patch(tmp_path / "p", pf)
    back = load_patch(tmp_path / "p", file_digest(tiny_checkpoints["hywa"]))
    assert patch_bytes(back) == patch_bytes(pf)
    for name, a in pf.patch.entries.items():
        np.testing.assert_array_equal(back.patch.entries[name], a)
    with pytest.raises(CompatibilityError):
        load_patch(tmp_path / "p", file_digest(tiny_checkpoints["none"]))


def test_trained_hypernetwork_separates_speakers(tiny_checkpoints, tiny_corpus):
    wavs = sorted((tiny_corpus / "enroll").glob("*.wav"))[:2]
    a, b = (_enroll(tiny_checkpoints["hywa"], w).patch for w in wavs)
    gap = max(np.abs(a.entries[n] - b.entries[n]).max() for n in a.entries)
    assert gap > 0
