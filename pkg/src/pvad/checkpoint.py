"""Binary containers for checkpoints (``HYWA1``) and weight patches (``HYWAPATCH1``).

Layout of both files::

    <magic>\\n
    <one-line JSON manifest, keys sorted>\\n
    <little-endian float32 blob>

The manifest carries the layout of every stored vector and the SHA-256 of the
blob, which is verified on load.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import ConditioningMode, HyperNetConfig
from .errors import CompatibilityError, CorruptionError
from .features import MelConfig
from .model import PVADModel
from .vad import LayoutEntry, ParamStore, VadConfig, WeightPatch

CHECKPOINT_MAGIC = b"HYWA1"
PATCH_MAGIC = b"HYWAPATCH1"


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    return sha256(Path(path).read_bytes())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(config: dict) -> str:
    return sha256(canonical_json(config).encode())


@dataclass
class Checkpoint:
    model: PVADModel
    config: dict
    seeds: dict = field(default_factory=dict)

    @property
    def mode(self) -> ConditioningMode:
        return self.model.mode


def _store_record(name: str, store: ParamStore, meta) -> dict:
    return {"name": name, "size": int(store.size), "layout": store.layout_records(), "meta": meta}


def _pack(magic: bytes, manifest: dict, blobs: list[np.ndarray]) -> bytes:
    blob = b"".join(np.ascontiguousarray(b, dtype="<f4").tobytes() for b in blobs)
    manifest = dict(manifest, blob_sha256=sha256(blob), blob_bytes=len(blob))
    return magic + b"\n" + canonical_json(manifest).encode() + b"\n" + blob


def _unpack(raw: bytes, magic: bytes, path) -> tuple[dict, bytes]:
    head, sep, rest = raw.partition(b"\n")
    if head != magic or not sep:
        raise CorruptionError(f"{path}: bad magic {head[:16]!r}, expected {magic!r}")
    line, sep, blob = rest.partition(b"\n")
    try:
        manifest = json.loads(line)
    except json.JSONDecodeError as e:
        raise CorruptionError(f"{path}: unreadable manifest") from e
    if len(blob) != manifest.get("blob_bytes") or sha256(blob) != manifest.get("blob_sha256"):
        raise CorruptionError(f"{path}: parameter blob digest mismatch")
    return manifest, blob


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    m = ckpt.model
    vcfg = m.vad.config
    stores = [
        _store_record("vad", m.vad, vcfg.to_dict()),
        _store_record("cond", m.cond, m.cond.config),
        {"name": "projection", "size": int(m.projection.size),
         "layout": [["projection", 0, list(m.projection.shape)]], "meta": None},
    ]
    manifest = {
        "format": "HYWA1", "config": ckpt.config, "config_digest": config_digest(ckpt.config),
        "mode": asdict(m.mode), "mel": asdict(m.mel), "seeds": ckpt.seeds, "stores": stores,
    }
    return _pack(CHECKPOINT_MAGIC, manifest, [m.vad.values, m.cond.values, m.projection])


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write ``ckpt``; returns the file's SHA-256."""
    data = checkpoint_bytes(ckpt)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return sha256(data)


def _store_from(rec: dict, blob: bytes, offset: int, config) -> ParamStore:
    values = np.frombuffer(blob, dtype="<f4", count=rec["size"], offset=offset * 4).astype(np.float32)
    layout = [LayoutEntry(n, o, tuple(s)) for n, o, s in rec["layout"]]
    return ParamStore(layout, values, config)


def load_checkpoint(path) -> Checkpoint:
    manifest, blob = _unpack(Path(path).read_bytes(), CHECKPOINT_MAGIC, path)
    if config_digest(manifest["config"]) != manifest["config_digest"]:
        raise CorruptionError(f"{path}: config digest mismatch")
    recs = {r["name"]: r for r in manifest["stores"]}
    offsets, pos = {}, 0
    for r in manifest["stores"]:
        offsets[r["name"]] = pos
        pos += r["size"]
    vcfg = VadConfig(**recs["vad"]["meta"])
    w = _store_from(recs["vad"], blob, offsets["vad"], vcfg)
    cond = _store_from(recs["cond"], blob, offsets["cond"], recs["cond"]["meta"])
    proj_rec = recs["projection"]
    proj = np.frombuffer(blob, dtype="<f4", count=proj_rec["size"], offset=offsets["projection"] * 4)
    proj = proj.reshape(proj_rec["layout"][0][2]).astype(np.float32)
    model = PVADModel(ConditioningMode(**manifest["mode"]), w, cond, proj, MelConfig(**manifest["mel"]))
    return Checkpoint(model, manifest["config"], manifest["seeds"])


def hyper_config(ckpt: Checkpoint) -> HyperNetConfig | None:
    meta = ckpt.model.cond.config or {}
    return HyperNetConfig(**meta["hyper"]) if meta.get("hyper") else None


# ---------------------------------------------------------------------------
# patches


@dataclass
class PatchFile:
    patch: WeightPatch
    embedding_sha256: str
    checkpoint_sha256: str


def patch_bytes(pf: PatchFile) -> bytes:
    entries, pos, blobs = [], 0, []
    for name in sorted(pf.patch.entries):
        a = np.asarray(pf.patch.entries[name], np.float32)
        entries.append([name, list(a.shape), pos])
        pos += a.size
        blobs.append(a.ravel())
    manifest = {"format": "HYWAPATCH1", "entries": entries, "origin": pf.patch.origin,
                "embedding_sha256": pf.embedding_sha256, "checkpoint_sha256": pf.checkpoint_sha256}
    return _pack(PATCH_MAGIC, manifest, blobs or [np.zeros(0, np.float32)])


def save_patch(path, pf: PatchFile) -> str:
    data = patch_bytes(pf)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return sha256(data)


def load_patch(path, checkpoint_sha256: str | None = None) -> PatchFile:
    manifest, blob = _unpack(Path(path).read_bytes(), PATCH_MAGIC, path)
    if checkpoint_sha256 is not None and manifest["checkpoint_sha256"] != checkpoint_sha256:
        raise CompatibilityError(
            f"{path}: patch was enrolled against checkpoint {manifest['checkpoint_sha256'][:12]}, "
            f"not {checkpoint_sha256[:12]}")
    entries = {}
    for name, shape, off in manifest["entries"]:
        n = int(np.prod(shape))
        entries[name] = np.frombuffer(blob, "<f4", count=n, offset=off * 4).reshape(shape).astype(np.float32)
    return PatchFile(WeightPatch(entries, manifest["origin"]), manifest["embedding_sha256"],
                     manifest["checkpoint_sha256"])
