"""Binary sample files, dataset manifests, parameter checkpoints and run manifests.

All binary payloads share one layout: an 8-byte magic, an 8-byte
little-endian header length, a UTF-8 JSON header, then raw little-endian
float64 arrays in the order the header lists them.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .geometry import ComponentSpec, PointCloud, SpecError
from .oracle import Sample, StressProfile

SAMPLE_MAGIC = b"NDNOSMP1"
DIFFEO_MAGIC = b"NDNODIF1"
OPERATOR_MAGIC = b"NDNOOPR1"
SAMPLE_CHANNELS = ("sigma_xx", "sigma_yy", "u_x", "u_y", "u_z")
MANIFEST = "manifest.json"


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


def _write_blob(path, magic: bytes, header: dict, arrays) -> None:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    os.replace(tmp, path)


def _read_blob(path, magic: bytes) -> tuple[dict, memoryview]:
    data = Path(path).read_bytes()
    if data[:8] != magic:
        raise FormatError(f"{path}: bad magic {data[:8]!r}, expected {magic!r}")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from e
    if header.get("dtype") != "f64le":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    return header, memoryview(data)[16 + n :]


def _take(body: memoryview, offset: int, count: int, path) -> tuple[np.ndarray, int]:
    end = offset + 8 * count
    if end > len(body):
        raise FormatError(f"{path}: payload shorter than the header declares")
    return np.frombuffer(body[offset:end], dtype="<f8").astype(np.float64), end


# samples


def write_sample(path, sample: Sample) -> None:
    n = len(sample.cloud)
    header = {
        "spec": sample.spec.to_dict(),
        "channels": ["points", *SAMPLE_CHANNELS],
        "n_points": n,
        "dtype": "f64le",
    }
    if sample.profile is not None:
        header["profile"] = sample.profile.to_dict()
    arrays = [sample.cloud.points.reshape(-1)]
    arrays += [sample.stress[:, j] for j in range(2)]
    arrays += [sample.deformation[:, j] for j in range(3)]
    _write_blob(path, SAMPLE_MAGIC, header, arrays)


def read_sample(path) -> Sample:
    header, body = _read_blob(path, SAMPLE_MAGIC)
    n = int(header["n_points"])
    off = 0
    chans = {}
    for name in header["channels"]:
        size = 3 * n if name == "points" else n
        chans[name], off = _take(body, off, size, path)
    if off != len(body):
        raise FormatError(f"{path}: {len(body) - off} trailing bytes")
    missing = [c for c in ("points", *SAMPLE_CHANNELS) if c not in chans]
    if missing:
        raise FormatError(f"{path}: missing channels {missing}")
    spec = ComponentSpec.from_dict(header["spec"])
    cloud = PointCloud(chans["points"].reshape(n, 3))
    stress = np.stack([chans["sigma_xx"], chans["sigma_yy"]], axis=1)
    defo = np.stack([chans["u_x"], chans["u_y"], chans["u_z"]], axis=1)
    profile = StressProfile.from_dict(header["profile"]) if "profile" in header else None
    return Sample(spec=spec, cloud=cloud, stress=stress, deformation=defo, profile=profile)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_hash(directory, files) -> str:
    """SHA-256 over the sample files' bytes, concatenated in manifest order."""
    h = hashlib.sha256()
    for f in files:
        with open(Path(directory) / f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def write_dataset(directory, samples, splits=None, extra: dict | None = None) -> dict:
    """Write ``sample_00000.bin`` ... plus ``manifest.json``; returns the manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for i, s in enumerate(samples):
        name = f"sample_{i:05d}.bin"
        write_sample(d / name, s)
        files.append(name)
    splits = list(splits) if splits is not None else ["train"] * len(files)
    if len(splits) != len(files):
        raise SpecError("splits: one tag per sample required")
    manifest = {
        "kind": "dataset",
        "files": files,
        "splits": splits,
        "dataset_hash": dataset_hash(d, files),
        "version": __version__,
    }
    manifest.update(extra or {})
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_manifest(directory) -> dict:
    p = Path(directory) / MANIFEST
    if not p.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    return json.loads(p.read_text())


def read_dataset(directory, split: str | None = None) -> list[Sample]:
    m = read_manifest(directory)
    out = []
    for f, tag in zip(m["files"], m.get("splits", ["train"] * len(m["files"]))):
        if split is None or tag == split:
            out.append(read_sample(Path(directory) / f))
    return out


# checkpoints


def _tensor_entries(tensors: dict) -> tuple[list, list]:
    entries, arrays = [], []
    for name, t in tensors.items():
        a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        entries.append({"name": name, "shape": list(a.shape)})
        arrays.append(a.reshape(-1))
    return entries, arrays


def _read_tensors(header: dict, body: memoryview, path) -> dict:
    off = 0
    out = {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        a, off = _take(body, off, int(np.prod(shape, dtype=np.int64)), path)
        out[e["name"]] = torch.as_tensor(a.reshape(shape))
    if off != len(body):
        raise FormatError(f"{path}: {len(body) - off} trailing bytes")
    return out


def save_diffeo(path, params, extra: dict | None = None) -> None:
    entries, arrays = _tensor_entries(params.tensors)
    header = {"config": asdict(params.config), "tensors": entries, "dtype": "f64le", **(extra or {})}
    _write_blob(path, DIFFEO_MAGIC, header, arrays)


def load_diffeo(path):
    from .diffeo import DiffeoConfig, DiffeoNetParams

    header, body = _read_blob(path, DIFFEO_MAGIC)
    params = DiffeoNetParams(DiffeoConfig(**header["config"]), _read_tensors(header, body, path))
    return params, header


def save_operator(path, params, extra: dict | None = None) -> None:
    """Spectral mixers are stored as (M, d, d, 2), i.e. interleaved re/im."""
    cfg = params.config
    entries, arrays = _tensor_entries(params.tensors)
    header = {
        "modes": list(cfg.modes),
        "T": cfg.n_layers,
        "d_v": cfg.width,
        "c_in": cfg.c_in,
        "c_out": cfg.c_out,
        "proj_hidden": cfg.proj_hidden,
        "coord_scale": cfg.coord_scale,
        "tensors": entries,
        "dtype": "f64le",
        **(extra or {}),
    }
    _write_blob(path, OPERATOR_MAGIC, header, arrays)


def load_operator(path):
    from .operator import OperatorConfig, OperatorParams

    header, body = _read_blob(path, OPERATOR_MAGIC)
    cfg = OperatorConfig(
        width=header["d_v"],
        n_layers=header["T"],
        modes=tuple(header["modes"]),
        c_in=header["c_in"],
        c_out=header["c_out"],
        proj_hidden=header.get("proj_hidden", 64),
        coord_scale=header.get("coord_scale", 0.5),
    )
    return OperatorParams(cfg, _read_tensors(header, body, path)), header


# run manifests


@dataclass
class RunManifest:
    command: str
    config: dict
    dataset_hash: str | None
    artifacts: dict
    seed: int
    wall_clock_s: float
    version: str = __version__
    started: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S"))

    def write(self, directory) -> Path:
        p = Path(directory) / MANIFEST
        p.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str))
        return p

    @classmethod
    def read(cls, directory) -> "RunManifest":
        return cls(**read_manifest(directory))
