"""Labeled point-cloud PLY I/O and run reports.

The vertex layout is fixed: float32 x, y, z; uint8 red, green, blue, label;
float32 confidence. Binary little-endian is the default encoding and is
byte-deterministic, so equal clouds always serialize to equal files. The
reader accepts both encodings, skips unknown scalar vertex properties with a
warning, and flags clouds whose files carry no label/confidence fields.
"""

from __future__ import annotations

import logging
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .imaging import DEFAULT_PALETTE, LabelPalette
from .semantics import (
    LabeledPoint,
    class_summary,
    confidence_histogram,
)

log = logging.getLogger(__name__)

_VERTEX_PROPS = (
    ("x", "float"),
    ("y", "float"),
    ("z", "float"),
    ("red", "uchar"),
    ("green", "uchar"),
    ("blue", "uchar"),
    ("label", "uchar"),
    ("confidence", "float"),
)

_PLY_TO_NUMPY = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PlyParseError(ValueError):
    """Malformed PLY header or truncated payload."""


@dataclass
class PlyCloud:
    points: list[LabeledPoint] = field(default_factory=list)
    comments: list[str] = field(default_factory=list)
    has_labels: bool = True
    has_confidence: bool = True

    def __len__(self) -> int:
        return len(self.points)


def _atomic_write(path: str, data: bytes) -> None:
    """Write via a temp file + rename so failures leave no partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _vertex_dtype() -> np.dtype:
    return np.dtype([(name, "<" + _PLY_TO_NUMPY[t]) for name, t in _VERTEX_PROPS])


def _pack_points(points: list[LabeledPoint]) -> np.ndarray:
    rec = np.empty(len(points), dtype=_vertex_dtype())
    for k, p in enumerate(points):
        rec[k] = (
            p.position[0], p.position[1], p.position[2],
            p.color[0], p.color[1], p.color[2],
            p.label, p.confidence,
        )
    return rec


def ply_bytes(cloud: PlyCloud, encoding: str = "binary") -> bytes:
    """Serialize; encoding is 'binary' (little-endian) or 'ascii'."""
    if encoding not in ("binary", "ascii"):
        raise ValueError(f"encoding must be 'binary' or 'ascii', got {encoding!r}")
    fmt = "binary_little_endian" if encoding == "binary" else "ascii"
    header = ["ply", f"format {fmt} 1.0"]
    for c in cloud.comments:
        header.append(f"comment {c}".replace("\n", " "))
    header.append(f"element vertex {len(cloud.points)}")
    header.extend(f"property {t} {name}" for name, t in _VERTEX_PROPS)
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    rec = _pack_points(cloud.points)
    if encoding == "binary":
        return head + rec.tobytes()
    rows = []
    for r in rec:
        rows.append(
            f"{r['x']:.9g} {r['y']:.9g} {r['z']:.9g} "
            f"{r['red']} {r['green']} {r['blue']} {r['label']} "
            f"{r['confidence']:.9g}"
        )
    return head + ("\n".join(rows) + ("\n" if rows else "")).encode("ascii")


def write_ply(cloud: PlyCloud, path: str, encoding: str = "binary") -> None:
    _atomic_write(path, ply_bytes(cloud, encoding))


def read_ply(path: str) -> PlyCloud:
    with open(path, "rb") as f:
        data = f.read()
    return parse_ply(data, source=path)


def parse_ply(data: bytes, source: str = "<bytes>") -> PlyCloud:
    """Parse a PLY byte string; errors carry the offending byte offset."""
    pos = 0

    def next_line():
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise PlyParseError(f"{source}: header ends prematurely at byte {pos}")
        line = data[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        return line

    if next_line() != "ply":
        raise PlyParseError(f"{source}: missing 'ply' magic at byte 0")
    fmt_line = next_line()
    if fmt_line == "format binary_little_endian 1.0":
        binary = True
    elif fmt_line == "format ascii 1.0":
        binary = False
    else:
        raise PlyParseError(f"{source}: unsupported format line {fmt_line!r}")

    comments: list[str] = []
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    trailing_elements = False
    while True:
        at = pos
        line = next_line()
        if line == "end_header":
            break
        if line.startswith("comment"):
            comments.append(line[len("comment"):].strip())
            continue
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            if parts[1] == "vertex":
                if count is not None:
                    raise PlyParseError(f"{source}: duplicate vertex element at byte {at}")
                count = int(parts[2])
                in_vertex = True
            else:
                if count is None:
                    raise PlyParseError(
                        f"{source}: element {parts[1]!r} precedes vertex at byte {at}"
                    )
                in_vertex = False
                trailing_elements = True
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise PlyParseError(
                    f"{source}: list property in vertex element at byte {at}"
                )
            if parts[1] not in _PLY_TO_NUMPY:
                raise PlyParseError(
                    f"{source}: unknown property type {parts[1]!r} at byte {at}"
                )
            props.append((parts[2], parts[1]))
        elif parts[0] == "property":
            continue  # property of a trailing element
        else:
            raise PlyParseError(f"{source}: unexpected header line {line!r} at byte {at}")
    if count is None:
        raise PlyParseError(f"{source}: no vertex element declared")

    names = [n for n, _ in props]
    for required in ("x", "y", "z"):
        if required not in names:
            raise PlyParseError(f"{source}: vertex element lacks property {required!r}")
    known = {n for n, _ in _VERTEX_PROPS}
    extras = [n for n in names if n not in known]
    if extras:
        log.warning("%s: ignoring extra vertex properties %s", source, extras)
    has_labels = "label" in names
    has_confidence = "confidence" in names
    has_rgb = all(c in names for c in ("red", "green", "blue"))

    dtype = np.dtype([(n, "<" + _PLY_TO_NUMPY[t]) for n, t in props])
    if binary:
        need = count * dtype.itemsize
        if len(data) - pos < need:
            raise PlyParseError(
                f"{source}: payload truncated at byte {len(data)} "
                f"(need {pos + need} for {count} vertices)"
            )
        rec = np.frombuffer(data[pos : pos + need], dtype=dtype)
        if trailing_elements and len(data) > pos + need:
            log.warning("%s: ignoring trailing elements after vertex data", source)
    else:
        text = data[pos:].decode("ascii", errors="replace").split()
        need = count * len(props)
        if len(text) < need:
            raise PlyParseError(
                f"{source}: ascii payload has {len(text)} values, needs {need}"
            )
        rec = np.zeros(count, dtype=dtype)
        for k in range(count):
            row = text[k * len(props) : (k + 1) * len(props)]
            for (n, _), value in zip(props, row):
                try:
                    rec[n][k] = float(value)
                except ValueError:
                    raise PlyParseError(
                        f"{source}: bad ascii value {value!r} in vertex {k}"
                    ) from None

    points = []
    for k in range(count):
        color = (int(rec["red"][k]), int(rec["green"][k]), int(rec["blue"][k])) \
            if has_rgb else (128, 128, 128)
        points.append(
            LabeledPoint(
                position=np.array([rec["x"][k], rec["y"][k], rec["z"][k]],
                                  dtype=np.float64),
                color=color,
                label=int(rec["label"][k]) if has_labels else 0,
                confidence=float(rec["confidence"][k]) if has_confidence else 0.0,
                views=0,
                track_id=k,
            )
        )
    return PlyCloud(points, comments, has_labels, has_confidence)


# --- reports -----------------------------------------------------------------

@dataclass
class ReconstructionStats:
    registered_images: int
    total_images: int
    point_count: int
    rms_reprojection_px: float
    gcp_residuals: dict[int, float] = field(default_factory=dict)
    config_hash: str = ""


def write_report(cloud: list[LabeledPoint], stats: ReconstructionStats,
                 directory: str, bins: int = 10,
                 palette: LabelPalette = DEFAULT_PALETTE) -> None:
    """Emit confidence_histogram.csv, class_summary.csv, reconstruction_stats.txt."""
    os.makedirs(directory, exist_ok=True)

    rows = ["bin_lo,bin_hi,count"]
    for (lo, hi), n in confidence_histogram(cloud, bins):
        rows.append(f"{lo:.6g},{hi:.6g},{n}")
    _atomic_write(os.path.join(directory, "confidence_histogram.csv"),
                  ("\n".join(rows) + "\n").encode())

    rows = ["class_id,name,points,mean_confidence"]
    for cls, name, n, mean_conf in class_summary(cloud, palette):
        rows.append(f"{cls},{name},{n},{mean_conf:.6g}")
    _atomic_write(os.path.join(directory, "class_summary.csv"),
                  ("\n".join(rows) + "\n").encode())

    lines = [
        f"registered_images = {stats.registered_images} / {stats.total_images}",
        f"point_count = {stats.point_count}",
        f"rms_reprojection_px = {stats.rms_reprojection_px:.6g}",
    ]
    if stats.gcp_residuals:
        mean = float(np.mean(list(stats.gcp_residuals.values())))
        lines.append(f"gcp_mean_residual_m = {mean:.6g}")
        for gid in sorted(stats.gcp_residuals):
            lines.append(f"gcp_residual_m[{gid}] = {stats.gcp_residuals[gid]:.6g}")
    else:
        lines.append("gcp_mean_residual_m = nan")
    if stats.config_hash:
        lines.append(f"config_hash = {stats.config_hash}")
    _atomic_write(os.path.join(directory, "reconstruction_stats.txt"),
                  ("\n".join(lines) + "\n").encode())
