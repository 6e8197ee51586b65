"""Annotation parsers, the binary field format and detection text files.

Field file layout (all little-endian)::

    b"BTFY"  magic
    u16      version (1)
    u32 x 4  C, H, W, S
    per class c in 0..C-1:
        f64[H*W] x 5   p, vx, vy, w_log, h_log (row-major)
        u8             1 if a b plane follows, else 0
        f64[H*W]       b (only when flagged)
        u8[ceil(H*W/8)] ignore bitmap, little bit order
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import BinaryIO, Dict, Hashable, Iterable, List, Mapping, Sequence, TextIO, Tuple

import numpy as np

from .core import BBox, Detection, FieldGrid

logger = logging.getLogger(__name__)

MAGIC = b"BTFY"
VERSION = 1
_HEADER = struct.Struct("<4sHIIII")

UAVDT_CLASSES = ("car", "truck", "bus")
VISDRONE_CLASSES = ("pedestrian", "people", "bicycle", "car", "van", "truck",
                    "tricycle", "awning-tricycle", "bus", "motor")


class AnnotationFormatError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class FieldFormatError(ValueError):
    """Base class for unreadable field files."""


class BadMagicError(FieldFormatError):
    pass


class UnsupportedVersionError(FieldFormatError):
    pass


class TruncatedStreamError(FieldFormatError):
    pass


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    left: float
    top: float
    width: float
    height: float
    class_id: int
    occlusion: int = 0
    truncation: int = 0
    ignore: bool = False

    def __post_init__(self):
        if not self.ignore and not (self.width > 0 and self.height > 0):
            raise ValueError(f"non-positive box size {self.width}x{self.height}")

    @property
    def corners(self) -> Tuple[float, float, float, float]:
        return (self.left, self.top, self.left + self.width, self.top + self.height)

    def to_bbox(self) -> BBox:
        return BBox.from_ltwh(self.left, self.top, self.width, self.height, max(self.class_id, 0))


def _fields(line: str, line_no: int, n: int, allow_extra: bool = False) -> List[str]:
    parts = [p.strip() for p in line.strip().split(",")]
    if parts and parts[-1] == "":
        parts = parts[:-1]  # trailing comma, common in VisDrone files
    if len(parts) < n or (len(parts) > n and not allow_extra):
        raise AnnotationFormatError(line_no, f"expected {n} comma-separated fields, got {len(parts)}")
    return parts


def _number(text: str, line_no: int, kind=float):
    try:
        value = kind(text)
    except ValueError:
        raise AnnotationFormatError(line_no, f"not a number: {text!r}") from None
    if kind is float and not np.isfinite(value):
        raise AnnotationFormatError(line_no, f"non-finite value {text!r}")
    return value


def parse_uavdt(stream: TextIO) -> List[AnnotationRecord]:
    """``frame,target_id,left,top,w,h,out_of_view,occlusion,category`` per line.

    Categories 1/2/3 map to car/truck/bus = 0/1/2. Blank lines are skipped;
    anything else malformed raises :class:`AnnotationFormatError`.
    """
    out = []
    for line_no, line in enumerate(stream, 1):
        if not line.strip():
            continue
        f = _fields(line, line_no, 9)
        frame = _number(f[0], line_no, int)
        left, top, w, h = (_number(v, line_no) for v in f[2:6])
        out_of_view = _number(f[6], line_no, int)
        occlusion = _number(f[7], line_no, int)
        category = _number(f[8], line_no, int)
        if category not in (1, 2, 3):
            raise AnnotationFormatError(line_no, f"unknown UAVDT category {category}")
        if not (w > 0 and h > 0):
            raise AnnotationFormatError(line_no, f"non-positive box size {w}x{h}")
        out.append(AnnotationRecord(str(frame), left, top, w, h, category - 1, occlusion, out_of_view))
    return out


def parse_visdrone(stream: TextIO, image_id: str = "0") -> List[AnnotationRecord]:
    """``left,top,w,h,score,category,truncation,occlusion`` per line.

    Categories 1..10 map to class ids 0..9; category 0 yields an
    ignore-flagged record (class id -1); category 11 ("others") is dropped
    and the dropped count logged.
    """
    out = []
    dropped = 0
    for line_no, line in enumerate(stream, 1):
        if not line.strip():
            continue
        f = _fields(line, line_no, 8)
        left, top, w, h = (_number(v, line_no) for v in f[:4])
        _number(f[4], line_no)
        category = _number(f[5], line_no, int)
        truncation = _number(f[6], line_no, int)
        occlusion = _number(f[7], line_no, int)
        if category == 11:
            dropped += 1
            continue
        if not 0 <= category <= 10:
            raise AnnotationFormatError(line_no, f"unknown VisDrone category {category}")
        ignore = category == 0
        if not ignore and not (w > 0 and h > 0):
            raise AnnotationFormatError(line_no, f"non-positive box size {w}x{h}")
        out.append(AnnotationRecord(image_id, left, top, w, h, category - 1, occlusion, truncation, ignore))
    if dropped:
        logger.info("dropped %d 'others' (category 11) annotations", dropped)
    return out


def group_records(records: Iterable[AnnotationRecord]):
    """Split records into ``(boxes_by_image, ignore_regions_by_image)``."""
    boxes: Dict[str, List[BBox]] = {}
    ignore: Dict[str, List[BBox]] = {}
    for r in records:
        boxes.setdefault(r.image_id, [])
        if r.ignore:
            if r.width > 0 and r.height > 0:
                ignore.setdefault(r.image_id, []).append(r.to_bbox())
        else:
            boxes[r.image_id].append(r.to_bbox())
    return boxes, ignore


def write_fields(grid: FieldGrid, stream: BinaryIO) -> None:
    C, H, W = grid.p.shape
    stream.write(_HEADER.pack(MAGIC, VERSION, C, H, W, grid.stride))
    for c in range(C):
        for plane in (grid.p, grid.vx, grid.vy, grid.w_log, grid.h_log):
            stream.write(np.ascontiguousarray(plane[c], dtype="<f8").tobytes())
        if grid.b is None:
            stream.write(b"\x00")
        else:
            stream.write(b"\x01")
            stream.write(np.ascontiguousarray(grid.b[c], dtype="<f8").tobytes())
        stream.write(np.packbits(grid.ignore[c].ravel(), bitorder="little").tobytes())


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise TruncatedStreamError(f"stream ended while reading {what}: wanted {n} bytes, got {len(data)}")
    return data


def read_fields(stream: BinaryIO) -> FieldGrid:
    head = stream.read(_HEADER.size)
    if len(head) >= 4 and head[:4] != MAGIC:
        raise BadMagicError(f"bad magic {head[:4]!r}, expected {MAGIC!r}")
    if len(head) != _HEADER.size:
        raise TruncatedStreamError("stream ended inside the header")
    _, version, C, H, W, S = _HEADER.unpack(head)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported field format version {version}")
    if S == 0:
        raise FieldFormatError("stride must be positive")
    n = H * W
    planes = {k: np.empty((C, H, W)) for k in ("p", "vx", "vy", "w_log", "h_log")}
    ignore = np.empty((C, H, W), dtype=bool)
    b = None
    for c in range(C):
        for k in ("p", "vx", "vy", "w_log", "h_log"):
            planes[k][c] = np.frombuffer(_read_exact(stream, 8 * n, f"plane {k} of class {c}"), "<f8").reshape(H, W)
        flag = _read_exact(stream, 1, "b flag")[0]
        if flag == 1:
            if b is None:
                b = np.full((C, H, W), np.nan)
            b[c] = np.frombuffer(_read_exact(stream, 8 * n, f"plane b of class {c}"), "<f8").reshape(H, W)
        elif flag != 0:
            raise FieldFormatError(f"invalid b flag {flag}")
        bits = np.frombuffer(_read_exact(stream, (n + 7) // 8, f"ignore bitmap of class {c}"), np.uint8)
        ignore[c] = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(H, W)
    return FieldGrid(stride=S, ignore=ignore, b=b, **planes)


def save_fields(grid: FieldGrid, path) -> None:
    with open(path, "wb") as fh:
        write_fields(grid, fh)


def load_fields(path) -> FieldGrid:
    with open(path, "rb") as fh:
        return read_fields(fh)


def write_detections(dets_by_image: Mapping[Hashable, Sequence[Detection]], stream: TextIO) -> None:
    """``image_id,left,top,w,h,score,class`` per detection; images in sorted order."""
    for image_id in sorted(dets_by_image, key=str):
        for d in dets_by_image[image_id]:
            b = d.box
            stream.write(f"{image_id},{b.cx - b.w / 2:.4f},{b.cy - b.h / 2:.4f},"
                         f"{b.w:.4f},{b.h:.4f},{d.score:.6f},{b.class_id}\n")


def read_detections(stream: TextIO) -> Dict[str, List[Detection]]:
    out: Dict[str, List[Detection]] = {}
    for line_no, line in enumerate(stream, 1):
        if not line.strip():
            continue
        f = _fields(line, line_no, 7)
        left, top, w, h, score = (_number(v, line_no) for v in f[1:6])
        cls = _number(f[6], line_no, int)
        try:
            det = Detection(BBox.from_ltwh(left, top, w, h, cls), score)
        except ValueError as exc:
            raise AnnotationFormatError(line_no, str(exc)) from None
        out.setdefault(f[0], []).append(det)
    return out


def write_annotations_uavdt(boxes_by_frame: Mapping[Hashable, Sequence[BBox]], stream: TextIO) -> None:
    """Write boxes in the UAVDT grammar (target id = running index per frame)."""
    for frame in sorted(boxes_by_frame, key=lambda k: (len(str(k)), str(k))):
        for n, b in enumerate(boxes_by_frame[frame], 1):
            stream.write(f"{frame},{n},{b.cx - b.w / 2:.4f},{b.cy - b.h / 2:.4f},"
                         f"{b.w:.4f},{b.h:.4f},1,0,{b.class_id + 1}\n")


def read_groups(stream: TextIO) -> Dict[str, str]:
    """Sidecar ``image_id,group`` lines used only as evaluation group keys."""
    out = {}
    for line_no, line in enumerate(stream, 1):
        if not line.strip():
            continue
        f = _fields(line, line_no, 2)
        out[f[0]] = f[1]
    return out
