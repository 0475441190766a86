"""Persistence: Gaussian-field PLY files, frame-folder datasets, PNG/depth output."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .types import CameraIntrinsics, CameraPose, FrameObservation, GaussianField

PLY_PROPERTIES = (
    ("x", "float"), ("y", "float"), ("z", "float"),
    ("rot_w", "float"), ("rot_x", "float"), ("rot_y", "float"), ("rot_z", "float"),
    ("scale_x", "float"), ("scale_y", "float"), ("scale_z", "float"),
    ("r", "float"), ("g", "float"), ("b", "float"),
    ("opacity", "float"),
    ("subgroup", "uchar"),
)
_PLY_DTYPE = np.dtype([(name, "<f4" if kind == "float" else "u1") for name, kind in PLY_PROPERTIES])


class PlyFormatError(ValueError):
    """Malformed PLY input; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _ply_header(count):
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {count}"]
    lines += [f"property {kind} {name}" for name, kind in PLY_PROPERTIES]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def export_field(field: GaussianField, path):
    """Write ``field`` as a binary little-endian PLY."""
    data = np.empty(len(field), dtype=_PLY_DTYPE)
    for i, axis in enumerate("xyz"):
        data[axis] = field.mu[:, i]
        data[f"scale_{axis}"] = field.scale[:, i]
    for i, c in enumerate("wxyz"):
        data[f"rot_{c}"] = field.rot[:, i]
    for i, c in enumerate("rgb"):
        data[c] = field.color[:, i]
    data["opacity"] = field.opacity
    data["subgroup"] = field.subgroup
    with open(path, "wb") as fh:
        fh.write(_ply_header(len(field)))
        fh.write(data.tobytes())


def _parse_header(buf):
    offset = 0
    count = None
    props = []
    first = True
    while True:
        end = buf.find(b"\n", offset)
        if end < 0:
            raise PlyFormatError("unterminated header", offset)
        line = buf[offset:end].decode("ascii", errors="replace").strip()
        if first:
            if line != "ply":
                raise PlyFormatError("missing 'ply' magic", offset)
            first = False
        elif line == "end_header":
            return count, props, end + 1
        elif line.startswith("format"):
            if line.split()[1:] != ["binary_little_endian", "1.0"]:
                raise PlyFormatError(f"unsupported format line {line!r}", offset)
        elif line.startswith("element"):
            parts = line.split()
            if len(parts) != 3 or parts[1] != "vertex" or count is not None:
                raise PlyFormatError(f"unexpected element line {line!r}", offset)
            try:
                count = int(parts[2])
            except ValueError:
                raise PlyFormatError(f"bad vertex count {parts[2]!r}", offset) from None
            if count < 0:
                raise PlyFormatError("negative vertex count", offset)
        elif line.startswith("property"):
            parts = line.split()
            if len(parts) != 3:
                raise PlyFormatError(f"bad property line {line!r}", offset)
            idx = len(props)
            if idx >= len(PLY_PROPERTIES) or (parts[2], parts[1]) != PLY_PROPERTIES[idx]:
                raise PlyFormatError(f"unknown or misplaced property {parts[2]!r}", offset)
            props.append(parts[2])
        elif line.startswith("comment") or line == "":
            pass
        else:
            raise PlyFormatError(f"unrecognized header line {line!r}", offset)
        offset = end + 1


def import_field(path) -> GaussianField:
    """Read a PLY written by :func:`export_field`; validates field invariants."""
    buf = Path(path).read_bytes()
    count, props, start = _parse_header(buf)
    if count is None:
        raise PlyFormatError("missing vertex element", start)
    if len(props) != len(PLY_PROPERTIES):
        raise PlyFormatError(f"expected {len(PLY_PROPERTIES)} properties, got {len(props)}", start)
    need = count * _PLY_DTYPE.itemsize
    have = len(buf) - start
    if have < need:
        raise PlyFormatError(f"truncated payload: need {need} bytes, have {have}", len(buf))
    if have > need:
        raise PlyFormatError("trailing bytes after payload", start + need)
    data = np.frombuffer(buf, dtype=_PLY_DTYPE, count=count, offset=start)
    return GaussianField(
        np.stack([data["x"], data["y"], data["z"]], axis=1),
        np.stack([data[f"rot_{c}"] for c in "wxyz"], axis=1),
        np.stack([data[f"scale_{c}"] for c in "xyz"], axis=1),
        np.stack([data[c] for c in "rgb"], axis=1),
        data["opacity"],
        data["subgroup"],
    )


def to_uint8(img):
    """[0, 1] floats to 8-bit, rounding half up."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img):
    Image.fromarray(to_uint8(img)).save(path)


def read_png(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_depth(path, depth):
    np.asarray(depth, dtype="<f4").tofile(path)


def read_depth(path, shape):
    d = np.fromfile(path, dtype="<f4")
    if d.size != shape[0] * shape[1]:
        raise ValueError(f"{path}: expected {shape[0] * shape[1]} floats, found {d.size}")
    return d.reshape(shape).astype(np.float64)


def save_sequence(root, frames, poses, intrinsics: CameraIntrinsics, extra=None):
    """Write frames as ``frame_%05d.png`` / ``mask_%05d.png`` / ``depth_%05d.bin`` plus poses.json."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames):
        write_png(root / f"frame_{i:05d}.png", fr.rgb)
        Image.fromarray(np.where(fr.mask, 255, 0).astype(np.uint8)).save(root / f"mask_{i:05d}.png")
        if fr.depth is not None:
            write_depth(root / f"depth_{i:05d}.bin", np.where(fr.mask, fr.depth, 0.0))
    meta = {
        "intrinsics": intrinsics.to_dict(),
        "poses": [p.matrix().tolist() for p in poses],
    }
    if extra:
        meta.update(extra)
    with open(root / "poses.json", "w") as fh:
        json.dump(meta, fh, indent=1)


def load_sequence(root):
    """Inverse of :func:`save_sequence`; returns (frames, poses, intrinsics, meta)."""
    root = Path(root)
    with open(root / "poses.json") as fh:
        meta = json.load(fh)
    intr = CameraIntrinsics(**meta["intrinsics"])
    poses = [CameraPose.from_matrix(m) for m in meta["poses"]]
    frames = []
    for i in range(len(poses)):
        rgb = read_png(root / f"frame_{i:05d}.png")
        mask = np.asarray(Image.open(root / f"mask_{i:05d}.png").convert("L")) >= 128
        dpath = root / f"depth_{i:05d}.bin"
        depth = read_depth(dpath, mask.shape) if os.path.exists(dpath) else None
        if depth is not None:
            depth = np.where(mask, depth, 0.0)
        frames.append(FrameObservation(rgb, mask, depth, t=i))
    return frames, poses, intr, meta
