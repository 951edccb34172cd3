"""Bit-exact volume files and the on-disk dataset layout.

File layout (all little-endian)::

    b"VUDA" | version u16 | channels u16 | depth, height, width u32
            | spacing sz, sy, sx f32 | payload f32 (C, D, H, W order)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..volume import Volume

MAGIC = b"VUDA"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIIfff")


class VolumeFormatError(ValueError):
    pass


def write_volume(path, v: Volume):
    c, (d, h, w) = v.channels, v.dims
    if c > 0xFFFF:
        raise VolumeFormatError(f"too many channels for the format: {c}")
    header = _HEADER.pack(MAGIC, VERSION, c, d, h, w, *v.spacing)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(v.data.astype("<f4", copy=False).tobytes(order="C"))


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header")
    magic, version, c, d, h, w, sz, sy, sx = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported format version {version}")
    n = c * d * h * w
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * n:
        raise VolumeFormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * n}")
    data = np.frombuffer(payload, dtype="<f4").reshape(c, d, h, w)
    return Volume(data.astype(np.float32), (sz, sy, sx))


def write_dataset(root, domain: str, samples, seeds: dict | None = None, extra: dict | None = None):
    """Write ``<root>/<domain>/<case>.img.vuda`` / ``.msk.vuda`` and ``manifest.json``."""
    out = Path(root) / domain
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for s in samples:
        write_volume(out / f"{s.case_id}.img.vuda", s.image)
        write_volume(out / f"{s.case_id}.msk.vuda", s.mask)
        cases.append({"case_id": s.case_id, "shape_seed": (seeds or {}).get(s.case_id)})
    manifest = {"domain": domain, "cases": cases}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def read_dataset(root, domain: str):
    from .synth import Sample

    base = Path(root) / domain
    manifest = json.loads((base / "manifest.json").read_text())
    samples = []
    for case in manifest["cases"]:
        cid = case["case_id"]
        samples.append(Sample(read_volume(base / f"{cid}.img.vuda"), read_volume(base / f"{cid}.msk.vuda"), cid))
    return samples, manifest
