"""Binary container for multicoil lattices and model tensors, with a JSON sidecar.

Layout: magic ``b"MCKS1\\0"``, five little-endian ``u32`` (n1, n2, c, r,
domain_tag), then ``r * c * n1 * n2`` little-endian float32 (re, im) pairs in
repetition -> coil -> row-major pixel order. The sidecar ``<file>.json``
repeats the dims and carries provenance (covariance, sampling scheme, seeds).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cdlnet import PARAM_NAMES, CdlnetParams
from .errors import ContainerFormatError
from .lattice import IMAGE, KSPACE
from .noise import CoilCovariance

MAGIC = b"MCKS1\x00"
HEADER = struct.Struct("<5I")
DOMAIN_TAGS = {IMAGE: 0, KSPACE: 1, "tensor": 2}
TAG_DOMAINS = {v: k for k, v in DOMAIN_TAGS.items()}


@dataclass
class Container:
    """``data (r, c, n1, n2)`` complex plus domain and free-form sidecar metadata."""

    data: np.ndarray
    domain: str = KSPACE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim == 2:
            d = d[None, None]
        elif d.ndim == 3:
            d = d[None]
        if d.ndim != 4:
            raise ContainerFormatError(f"container data must be (r, c, n1, n2), got {d.shape}")
        if self.domain not in DOMAIN_TAGS:
            raise ContainerFormatError(f"unknown domain {self.domain!r}")
        self.data = d

    @property
    def dims(self) -> dict:
        r, c, n1, n2 = self.data.shape
        return {"n1": n1, "n2": n2, "c": c, "r": r}


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def encode(data: np.ndarray, domain: str) -> bytes:
    r, c, n1, n2 = data.shape
    head = MAGIC + HEADER.pack(n1, n2, c, r, DOMAIN_TAGS[domain])
    pairs = np.empty(data.shape + (2,), "<f4")
    pairs[..., 0] = data.real
    pairs[..., 1] = data.imag
    return head + pairs.tobytes()


def decode(raw: bytes) -> tuple[np.ndarray, str]:
    if len(raw) < len(MAGIC) + HEADER.size or raw[: len(MAGIC)] != MAGIC:
        raise ContainerFormatError("bad magic; not a lattice container")
    n1, n2, c, r, tag = HEADER.unpack_from(raw, len(MAGIC))
    if tag not in TAG_DOMAINS:
        raise ContainerFormatError(f"unknown domain tag {tag}")
    start = len(MAGIC) + HEADER.size
    expected = 8 * n1 * n2 * c * r
    if len(raw) - start != expected:
        raise ContainerFormatError(f"payload has {len(raw) - start} bytes, header implies {expected}")
    pairs = np.frombuffer(raw, "<f4", offset=start).reshape(r, c, n1, n2, 2)
    data = pairs[..., 0].astype(np.float64) + 1j * pairs[..., 1].astype(np.float64)
    return data, TAG_DOMAINS[tag]


def write_container(path, box: Container) -> Path:
    path = Path(path)
    meta = dict(box.meta)
    meta.update(box.dims)
    meta["domain"] = box.domain
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode(box.data, box.domain))
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write container {path}: {exc.strerror or exc}") from exc
    return path


def read_container(path) -> Container:
    """Read and cross-check header against sidecar."""
    path = Path(path)
    try:
        raw = path.read_bytes()
        meta = json.loads(sidecar_path(path).read_text())
    except FileNotFoundError as exc:
        raise OSError(f"missing container file {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise ContainerFormatError(f"sidecar of {path} is not valid JSON: {exc}") from exc
    data, domain = decode(raw)
    box = Container(data, domain, meta)
    for key, val in box.dims.items():
        if meta.get(key) != val:
            raise ContainerFormatError(f"{path}: sidecar {key}={meta.get(key)} but header says {val}")
    if meta.get("domain") != domain:
        raise ContainerFormatError(f"{path}: sidecar domain {meta.get('domain')} but header says {domain}")
    return box


# ---------------------------------------------------------------------------
# sidecar helpers


def covariance_to_json(cov: CoilCovariance) -> list:
    """Row-major ``[re, im]`` pairs."""
    return [[[float(v.real), float(v.imag)] for v in row] for row in cov.sigma]


def covariance_from_json(obj) -> CoilCovariance:
    try:
        arr = np.asarray(obj, float)
        return CoilCovariance(arr[..., 0] + 1j * arr[..., 1])
    except (TypeError, ValueError, IndexError) as exc:
        raise ContainerFormatError(f"malformed covariance in sidecar: {exc}") from exc


# ---------------------------------------------------------------------------
# model checkpoints


def params_to_container(p: CdlnetParams, extra: dict | None = None) -> Container:
    """Flatten all tensors into one ``(1, 1, n, 1)`` tensor container with offsets."""
    chunks, entries, offset = [], [], 0
    for name in PARAM_NAMES:
        arr = getattr(p, name)
        chunks.append(arr.ravel().astype(complex))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size),
                        "real": not np.iscomplexobj(arr)})
        offset += arr.size
    flat = np.concatenate(chunks)
    meta = {"kind": "cdlnet", "depth": p.depth, "subbands": p.subbands, "kernel_size": p.kernel_size,
            "adaptive": bool(p.adaptive), "tensors": entries}
    if extra:
        meta.update(extra)
    return Container(flat[None, None, :, None], "tensor", meta)


def params_from_container(box: Container) -> CdlnetParams:
    meta = box.meta
    if meta.get("kind") != "cdlnet" or box.domain != "tensor":
        raise ContainerFormatError("container does not hold a CDLNet checkpoint")
    flat = box.data.ravel()
    out = {}
    try:
        for e in meta["tensors"]:
            seg = flat[e["offset"]: e["offset"] + e["count"]]
            if seg.size != e["count"]:
                raise ContainerFormatError(f"tensor {e['name']} runs past the payload")
            seg = seg.real if e["real"] else seg
            out[e["name"]] = seg.reshape(e["shape"])
        p = CdlnetParams(**{k: out[k] for k in PARAM_NAMES}, adaptive=bool(meta["adaptive"]))
    except KeyError as exc:
        raise ContainerFormatError(f"checkpoint manifest lacks {exc}") from exc
    if (p.depth, p.subbands, p.kernel_size) != (meta["depth"], meta["subbands"], meta["kernel_size"]):
        raise ContainerFormatError("checkpoint manifest dims disagree with tensors")
    return p


def save_params(path, p: CdlnetParams, extra: dict | None = None) -> Path:
    return write_container(path, params_to_container(p, extra))


def load_params(path) -> CdlnetParams:
    return params_from_container(read_container(path))


def same_bytes(a, b) -> bool:
    """Byte equality of two containers including sidecars."""
    return all(Path(x).read_bytes() == Path(y).read_bytes()
               for x, y in ((a, b), (sidecar_path(a), sidecar_path(b))))

