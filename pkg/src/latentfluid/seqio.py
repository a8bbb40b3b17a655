"""Serialization of sequences, boundaries, cameras and images.

Binary layouts (little-endian):

  .lseq   b"LIPS" | u32 version | u32 N | u32 T | f64 frame_dt
          | T blocks of N rows of 6 f64 (position xyz, velocity xyz)
  .lbnd   b"LIPB" | u32 N_b | N_b rows of 6 f64 (position xyz, normal xyz)

Parse failures raise DataFormatError naming the byte offset.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ContractViolation, DataFormatError
from .scenes import BoundarySet
from .sph import Sequence

SEQ_MAGIC = b"LIPS"
SEQ_VERSION = 1
BND_MAGIC = b"LIPB"


def write_sequence(path, seq: Sequence) -> None:
    p = np.asarray(seq.positions, dtype=np.float64)
    v = np.asarray(seq.velocities, dtype=np.float64)
    if p.ndim != 3 or p.shape[2] != 3 or p.shape != v.shape:
        raise ContractViolation(f"sequence arrays must be (T, N, 3), got {p.shape} and {v.shape}")
    t, n = p.shape[0], p.shape[1]
    if t < 2:
        raise ContractViolation(f"refusing to write a sequence with T={t} < 2 frames")
    with open(path, "wb") as fh:
        fh.write(SEQ_MAGIC)
        fh.write(struct.pack("<III", SEQ_VERSION, n, t))
        fh.write(struct.pack("<d", float(seq.frame_dt)))
        frames = np.concatenate([p, v], axis=2)  # (T, N, 6)
        fh.write(np.ascontiguousarray(frames, dtype="<f8").tobytes())


def read_sequence(path) -> Sequence:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != SEQ_MAGIC:
        raise DataFormatError(f"bad sequence magic {blob[:4]!r} at byte 0, expected {SEQ_MAGIC!r}")
    if len(blob) < 24:
        raise DataFormatError(f"sequence header truncated at byte {len(blob)}, need 24")
    version, n, t = struct.unpack("<III", blob[4:16])
    if version != SEQ_VERSION:
        raise DataFormatError(f"unsupported sequence version {version} at byte 4")
    (frame_dt,) = struct.unpack("<d", blob[16:24])
    need = 24 + t * n * 6 * 8
    if len(blob) < need:
        raise DataFormatError(f"sequence data truncated at byte {len(blob)}, need {need}")
    if len(blob) > need:
        raise DataFormatError(f"trailing bytes after sequence data at byte {need}")
    frames = np.frombuffer(blob[24:need], dtype="<f8").reshape(t, n, 6)
    return Sequence(frames[:, :, :3].copy(), frames[:, :, 3:].copy(), frame_dt)


def write_boundary(path, bnd: BoundarySet) -> None:
    p = np.asarray(bnd.positions, dtype=np.float64)
    nrm = np.asarray(bnd.normals, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or p.shape != nrm.shape:
        raise ContractViolation(f"boundary arrays must be (M, 3), got {p.shape} and {nrm.shape}")
    with open(path, "wb") as fh:
        fh.write(BND_MAGIC)
        fh.write(struct.pack("<I", p.shape[0]))
        fh.write(np.ascontiguousarray(np.concatenate([p, nrm], axis=1), dtype="<f8").tobytes())


def read_boundary(path) -> BoundarySet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != BND_MAGIC:
        raise DataFormatError(f"bad boundary magic {blob[:4]!r} at byte 0, expected {BND_MAGIC!r}")
    if len(blob) < 8:
        raise DataFormatError(f"boundary header truncated at byte {len(blob)}, need 8")
    (m,) = struct.unpack("<I", blob[4:8])
    need = 8 + m * 6 * 8
    if len(blob) < need:
        raise DataFormatError(f"boundary data truncated at byte {len(blob)}, need {need}")
    rows = np.frombuffer(blob[8:need], dtype="<f8").reshape(m, 6)
    return BoundarySet(rows[:, :3].copy(), rows[:, 3:].copy())


# -- cameras ----------------------------------------------------------------


@dataclass
class CameraSpec:
    c2w: np.ndarray   # (4, 4) camera-to-world, OpenGL convention (camera looks along -z)
    focal: float      # pixels
    width: int
    height: int


def write_cameras(path, cams: list[CameraSpec]) -> None:
    payload = [
        {
            "c2w": np.asarray(c.c2w, dtype=np.float64).reshape(16).tolist(),
            "focal": float(c.focal),
            "width": int(c.width),
            "height": int(c.height),
        }
        for c in cams
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def read_cameras(path) -> list[CameraSpec]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"unparseable camera file at byte {e.pos}: {e.msg}") from e
    cams = []
    for i, rec in enumerate(payload):
        c2w = np.asarray(rec["c2w"], dtype=np.float64)
        if c2w.size != 16:
            raise DataFormatError(f"camera {i}: c2w must have 16 entries, got {c2w.size}")
        cams.append(
            CameraSpec(c2w.reshape(4, 4), float(rec["focal"]), int(rec["width"]), int(rec["height"]))
        )
    return cams


# -- scene manifest -----------------------------------------------------------


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def read_manifest(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"unparseable manifest at byte {e.pos}: {e.msg}") from e


# -- images -------------------------------------------------------------------


def image_name(view: int, frame: int) -> str:
    return f"view{view:02d}_t{frame:03d}.png"


def write_image(path, img: np.ndarray) -> None:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ContractViolation(f"image must be (H, W, 3), got {a.shape}")
    q = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float64)
    return a / 255.0
