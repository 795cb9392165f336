"""Skill library: a frozen base predictor plus named adapters, stored as a
directory of checksummed tensor files under a JSON manifest.

Tensor file layout (little-endian)::

    b"PSEC" | u32 version
    repeated until EOF:
        u32 name_len | name (utf-8) | u32 rank | u64 dims[rank]
        | f64 payload[prod(dims)] | sha256(payload) (32 bytes)
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffusion import NoisePredictor
from .lora import LoraAdapter
from .numcore import MlpSpec, params_digest

MAGIC = b"PSEC"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"


class LibraryError(Exception):
    pass


class CorruptFileError(LibraryError):
    pass


class ChecksumError(LibraryError):
    def __init__(self, tensor: str, path: str | Path):
        super().__init__(f"checksum mismatch in tensor {tensor!r} of {path}")
        self.tensor = tensor
        self.path = str(path)


class VersionError(LibraryError):
    pass


class ManifestError(LibraryError):
    pass


# --- tensor files ------------------------------------------------------------

def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(payload)
        out.append(hashlib.sha256(payload).digest())
    return b"".join(out)


def decode_tensors(data: bytes, path: str | Path = "<bytes>") -> dict[str, np.ndarray]:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CorruptFileError(f"{path}: missing PSEC magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    pos = 8
    tensors: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + nlen > len(data):
                raise CorruptFileError(f"{path}: truncated tensor name at byte {pos}")
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if rank > 8:
                raise CorruptFileError(f"{path}: tensor {name!r} claims rank {rank}")
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 8 * count
            if end + 32 > len(data):
                raise CorruptFileError(f"{path}: tensor {name!r} is truncated")
            payload = data[pos:end]
            digest = data[end : end + 32]
            if hashlib.sha256(payload).digest() != digest:
                raise ChecksumError(name, path)
            if name in tensors:
                raise CorruptFileError(f"{path}: duplicate tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
            pos = end + 32
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
    return tensors


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> str:
    """Write a tensor file atomically; returns the file's sha256."""
    data = encode_tensors(tensors)
    _atomic_write(Path(path), data)
    return hashlib.sha256(data).hexdigest()


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CorruptFileError(f"missing tensor file {path}") from None
    return decode_tensors(data, path)


# --- predictor / adapter packing -------------------------------------------

def predictor_tensors(p: NoisePredictor) -> dict[str, np.ndarray]:
    out = dict(p.params)
    out["state_mean"] = p.state_mean
    out["state_std"] = p.state_std
    return out


def predictor_from_tensors(t: dict[str, np.ndarray], meta: dict) -> NoisePredictor:
    spec = MlpSpec(tuple(meta["layer_dims"]))
    params = {k: t[k] for k in spec.param_shapes()}
    return NoisePredictor(
        state_dim=int(meta["state_dim"]),
        action_dim=int(meta["action_dim"]),
        T=int(meta["T"]),
        spec=spec,
        params=params,
        state_mean=t["state_mean"],
        state_std=t["state_std"],
    )


def predictor_hash(p: NoisePredictor) -> str:
    return params_digest(predictor_tensors(p))


def adapter_tensors(a: LoraAdapter) -> dict[str, np.ndarray]:
    return a.params()


def adapter_from_tensors(t: dict[str, np.ndarray], rank: int, scale: float) -> LoraAdapter:
    n = len([k for k in t if k.startswith("B")])
    return LoraAdapter([t[f"B{i}"] for i in range(n)], [t[f"A{i}"] for i in range(n)], rank, scale)


# --- library ----------------------------------------------------------------

PROVENANCE_KEYS = ("dataset", "weighting", "steps", "seed", "final_loss")


def utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()


@dataclass
class SkillEntry:
    name: str
    adapter: LoraAdapter
    provenance: dict
    created_at: str = field(default_factory=utc_now)

    def __post_init__(self) -> None:
        missing = [k for k in PROVENANCE_KEYS if k not in self.provenance]
        if missing:
            raise ValueError(f"skill {self.name!r} provenance lacks {missing}")


@dataclass
class Artifact:
    """Auxiliary checkpoint kept beside the skills (critics, composers)."""

    name: str
    kind: str
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


@dataclass
class SkillLibrary:
    base: NoisePredictor
    entries: list[SkillEntry] = field(default_factory=list)
    artifacts: list[Artifact] = field(default_factory=list)

    @property
    def base_hash(self) -> str:
        return predictor_hash(self.base)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def get(self, name: str) -> SkillEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(f"no skill named {name!r}; library has {self.names()}")

    def adapters(self, names) -> list[LoraAdapter]:
        return [self.get(n).adapter for n in names]

    def artifact(self, name: str) -> Artifact:
        for a in self.artifacts:
            if a.name == name:
                return a
        raise KeyError(f"no artifact named {name!r}")

    def with_artifact(self, art: Artifact) -> "SkillLibrary":
        rest = [a for a in self.artifacts if a.name != art.name]
        return replace(self, entries=list(self.entries), artifacts=rest + [art])


def add_skill(lib: SkillLibrary, entry: SkillEntry) -> SkillLibrary:
    if entry.name in lib.names():
        raise ValueError(f"skill {entry.name!r} already exists")
    if not entry.name or "/" in entry.name or entry.name.startswith("."):
        raise ValueError(f"invalid skill name {entry.name!r}")
    entry.adapter.check_fits(lib.base.spec)
    return replace(lib, entries=[*lib.entries, entry], artifacts=list(lib.artifacts))


def remove_skill(lib: SkillLibrary, name: str) -> SkillLibrary:
    lib.get(name)
    return replace(lib, entries=[e for e in lib.entries if e.name != name], artifacts=list(lib.artifacts))


def _base_meta(p: NoisePredictor) -> dict:
    return {"state_dim": p.state_dim, "action_dim": p.action_dim, "T": p.T, "layer_dims": list(p.spec.layer_dims)}


def save_library(lib: SkillLibrary, path: str | Path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "psec-library",
        "version": FORMAT_VERSION,
        "base": {
            "file": "base.psec",
            "sha256": save_tensors(root / "base.psec", predictor_tensors(lib.base)),
            "content_hash": lib.base_hash,
            **_base_meta(lib.base),
        },
        "skills": [],
        "artifacts": [],
    }
    for e in lib.entries:
        fname = f"skill-{e.name}.psec"
        manifest["skills"].append(
            {
                "name": e.name,
                "file": fname,
                "sha256": save_tensors(root / fname, adapter_tensors(e.adapter)),
                "rank": e.adapter.rank,
                "layer_ranks": e.adapter.layer_ranks(),
                "scale": e.adapter.scale,
                "provenance": e.provenance,
                "created_at": e.created_at,
            }
        )
    for a in lib.artifacts:
        fname = f"{a.kind}-{a.name}.psec"
        manifest["artifacts"].append(
            {"name": a.name, "kind": a.kind, "file": fname, "sha256": save_tensors(root / fname, a.tensors), "meta": a.meta}
        )
    referenced = {MANIFEST, manifest["base"]["file"]}
    referenced |= {s["file"] for s in manifest["skills"]} | {a["file"] for a in manifest["artifacts"]}
    for stale in root.glob("*.psec"):
        if stale.name not in referenced:
            stale.unlink()
    _atomic_write(root / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return root


def _checked(root: Path, rec: dict) -> dict[str, np.ndarray]:
    fpath = root / rec["file"]
    tensors = load_tensors(fpath)
    actual = hashlib.sha256(fpath.read_bytes()).hexdigest()
    if actual != rec["sha256"]:
        raise ChecksumError(f"<file {rec['file']}>", fpath)
    return tensors


def load_library(path: str | Path) -> SkillLibrary:
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.exists():
        raise ManifestError(f"no {MANIFEST} in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{mpath}: {exc}") from exc
    if manifest.get("format") != "psec-library":
        raise ManifestError(f"{mpath} is not a skill library manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionError(f"library version {manifest.get('version')}, expected {FORMAT_VERSION}")
    files = [manifest["base"]["file"]] + [s["file"] for s in manifest["skills"]] + [a["file"] for a in manifest["artifacts"]]
    if len(set(files)) != len(files):
        raise ManifestError("a tensor file is referenced more than once")
    brec = manifest["base"]
    base = predictor_from_tensors(_checked(root, brec), brec)
    if predictor_hash(base) != brec["content_hash"]:
        raise ChecksumError("<base content hash>", root / brec["file"])
    entries = []
    for rec in manifest["skills"]:
        ad = adapter_from_tensors(_checked(root, rec), rec["rank"], rec["scale"])
        ad.check_fits(base.spec)
        entries.append(SkillEntry(rec["name"], ad, rec["provenance"], rec["created_at"]))
    artifacts = [Artifact(r["name"], r["kind"], _checked(root, r), r["meta"]) for r in manifest["artifacts"]]
    return SkillLibrary(base, entries, artifacts)


def library_hashes(path: str | Path) -> dict[str, str]:
    """Tensor-file hashes by role, as recorded in the manifest."""
    manifest = json.loads((Path(path) / MANIFEST).read_text())
    out = {"base": manifest["base"]["sha256"]}
    out.update({f"skill:{s['name']}": s["sha256"] for s in manifest["skills"]})
    out.update({f"{a['kind']}:{a['name']}": a["sha256"] for a in manifest["artifacts"]})
    return out
