"""File formats: OCRA binary tensors, named-section containers, PLY, PGM.

Binary tensor layout (little endian)::

    b"OCRA" | u32 kind | u32 H | u32 W | payload (row-major)

Kinds 1-4 carry a single image-shaped tensor. Kind 5 is a container of named
sections; its header reuses the H slot as the section count.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import DepthMap, Mask, PointCloud

MAGIC = b"OCRA"
KIND_DEPTH, KIND_MASK, KIND_FLOW, KIND_FORCE, KIND_CONTAINER = 1, 2, 3, 4, 5
_KIND_LAYOUT = {
    KIND_DEPTH: ("<f4", 1),
    KIND_MASK: ("u1", 1),
    KIND_FLOW: ("<f4", 2),
    KIND_FORCE: ("<f4", 3),
}
_HEADER = struct.Struct("<4sIII")

_DTYPE_CODES = {0: "<f8", 1: "<f4", 2: "u1", 3: "<i8"}
_CODE_OF = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise FormatError(f"missing input file: {path}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed JSON in {path}: {e}") from e


def encode_tensor(kind: int, array) -> bytes:
    dtype, channels = _KIND_LAYOUT[kind]
    a = np.asarray(array)
    expected_ndim = 2 if channels == 1 else 3
    if a.ndim != expected_ndim or (channels > 1 and a.shape[2] != channels):
        raise FormatError(f"array of shape {a.shape} does not fit tensor kind {kind}")
    h, w = a.shape[:2]
    return _HEADER.pack(MAGIC, kind, h, w) + np.ascontiguousarray(a, dtype=dtype).tobytes()


def decode_tensor(data: bytes, expected_kind: int | None = None):
    if len(data) < _HEADER.size:
        raise FormatError("truncated OCRA header")
    magic, kind, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("bad magic, not an OCRA file")
    if expected_kind is not None and kind != expected_kind:
        raise FormatError(f"expected tensor kind {expected_kind}, found {kind}")
    if kind not in _KIND_LAYOUT:
        raise FormatError(f"unknown tensor kind {kind}")
    dtype, channels = _KIND_LAYOUT[kind]
    shape = (h, w) if channels == 1 else (h, w, channels)
    n = int(np.prod(shape)) * np.dtype(dtype).itemsize
    payload = data[_HEADER.size:]
    if len(payload) != n:
        raise FormatError(f"payload size {len(payload)} != expected {n}")
    return kind, np.frombuffer(payload, dtype=dtype).reshape(shape)


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as e:
        raise FormatError(f"missing input file: {path}") from e


def save_depth(path, depth: DepthMap):
    atomic_write_bytes(path, encode_tensor(KIND_DEPTH, depth.values))


def load_depth(path) -> DepthMap:
    return DepthMap(decode_tensor(_read_bytes(path), KIND_DEPTH)[1].astype(float))


def save_mask(path, mask: Mask):
    atomic_write_bytes(path, encode_tensor(KIND_MASK, mask.bits.astype(np.uint8)))


def load_mask(path) -> Mask:
    return Mask(decode_tensor(_read_bytes(path), KIND_MASK)[1] != 0)


def save_field(path, field):
    """Write an H x W x 2 flow or H x W x 3 force array."""
    a = np.asarray(field)
    kind = KIND_FLOW if a.shape[-1] == 2 else KIND_FORCE
    atomic_write_bytes(path, encode_tensor(kind, a))


def load_field(path) -> np.ndarray:
    kind, a = decode_tensor(_read_bytes(path))
    if kind not in (KIND_FLOW, KIND_FORCE):
        raise FormatError(f"{path} holds tensor kind {kind}, not a flow/force field")
    return a.astype(float)


def encode_container(sections: dict) -> bytes:
    """Serialize ``{name: ndarray | str}``; strings are stored as UTF-8 bytes."""
    out = [_HEADER.pack(MAGIC, KIND_CONTAINER, len(sections), 0)]
    for name in sorted(sections):
        value = sections[name]
        if isinstance(value, str):
            arr = np.frombuffer(value.encode("utf-8"), dtype=np.uint8)
        else:
            arr = np.asarray(value)
            if arr.dtype.kind == "f":
                arr = arr.astype("<f8")
            elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
                arr = arr.astype("<i8")
            elif arr.dtype == bool:
                arr = arr.astype(np.uint8)
        if arr.dtype not in _CODE_OF:
            raise FormatError(f"section {name!r}: unsupported dtype {arr.dtype}")
        code = _CODE_OF[arr.dtype]
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_container(data: bytes) -> dict:
    if len(data) < _HEADER.size:
        raise FormatError("truncated OCRA header")
    magic, kind, count, _ = _HEADER.unpack_from(data)
    if magic != MAGIC or kind != KIND_CONTAINER:
        raise FormatError("not an OCRA container")
    pos = _HEADER.size
    sections = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + klen].decode("utf-8")
            pos += klen
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            dtype = np.dtype(_DTYPE_CODES[code])
            n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + n > len(data):
                raise FormatError(f"section {name!r} truncated")
            sections[name] = np.frombuffer(data[pos:pos + n], dtype=dtype).reshape(shape).copy()
            pos += n
    except (struct.error, KeyError) as e:
        raise FormatError(f"corrupt container: {e}") from e
    return sections


def section_text(sections: dict, name: str) -> str:
    return sections[name].tobytes().decode("utf-8")


def save_ply(path, cloud: PointCloud):
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(cloud)}",
        "property double x", "property double y", "property double z",
        "property uchar label", "end_header",
    ]
    body = [f"{x!r} {y!r} {z!r} {int(l)}" for (x, y, z), l in
            zip(cloud.points.tolist(), cloud.labels.tolist())]
    atomic_write_text(path, "\n".join(lines + body) + "\n")


def load_ply(path) -> PointCloud:
    try:
        text = Path(path).read_text(encoding="ascii")
    except FileNotFoundError as e:
        raise FormatError(f"missing input file: {path}") from e
    header, sep, body = text.partition("end_header\n")
    if not sep or not header.startswith("ply"):
        raise FormatError(f"{path}: not an ASCII PLY file")
    n = None
    props = []
    for line in header.splitlines():
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            props.append(parts[-1])
    if n is None or props[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: unsupported PLY layout")
    if n == 0:
        return PointCloud.empty()
    rows = np.array([r.split() for r in body.strip().splitlines()[:n]], dtype=float).reshape(n, -1)
    labels = rows[:, props.index("label")].astype(np.uint8) if "label" in props else None
    return PointCloud(rows[:, :3], labels)


def save_pgm(path, image):
    """Write a [0, 1] gray image as binary 8-bit PGM."""
    img = np.clip(np.rint(np.asarray(image, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def load_pgm(path) -> np.ndarray:
    data = _read_bytes(path)
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: only binary P5 PGM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    pos += 1
    img = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8)
    if img.size != w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return img.reshape(h, w).astype(float) / 255.0
