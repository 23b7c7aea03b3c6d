"""Binary container for datasets and reconstruction results.

Layout (little-endian)::

    magic      8 bytes   b"MCMR0001"
    hdr_len    uint32    length of the JSON header in bytes
    header     UTF-8 JSON {kind, N, Q, H, W, center_lines, sections: [{name, offset, byte_len}]}
    sections   raw bytes, in header order; ``offset`` counts from the first
               byte after the header

Dataset sections: ``kspace`` (N*Q*H*W complex pairs), ``coils`` (Q*H*W complex
pairs), ``support`` (H*W bytes 0/1), ``masks`` (per frame a uint32 count
followed by uint32 row indices), and optionally ``reference`` (N*H*W complex
pairs) and ``gt_motion`` (N*N*2*H*W float64, order [t1][t2][dy, dx]).

Result files (``kind == "result"``) carry ``recon`` and optionally ``motion``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .data import (
    CoilMaps,
    Dataset,
    ImageSequence,
    KSpaceSet,
    MotionFieldSet,
    SamplingMaskSet,
    ValidationError,
    validate,
    validate_images,
    validate_motion,
)

MAGIC = b"MCMR0001"
_MAGIC_STEM = b"MCMR"
_C16 = np.dtype("<c16")
_F8 = np.dtype("<f8")
_U4 = np.dtype("<u4")


class FormatError(ValueError):
    """Malformed container; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int, section: Optional[str] = None):
        self.offset = offset
        self.section = section
        where = f" in section {section!r}" if section else ""
        super().__init__(f"{message}{where} at byte offset {offset}")


class ReconResult(NamedTuple):
    recon: ImageSequence
    motion: Optional[MotionFieldSet] = None
    meta: dict = {}


def _encode_masks(masks: SamplingMaskSet) -> bytes:
    parts = []
    for lines in masks.lines:
        parts.append(np.array([len(lines)], dtype=_U4).tobytes())
        parts.append(np.asarray(lines, dtype=_U4).tobytes())
    return b"".join(parts)


def _decode_masks(buf: bytes, n: int, h: int, w: int, center_lines: int, base: int) -> SamplingMaskSet:
    lines = []
    pos = 0
    for t in range(n):
        if pos + 4 > len(buf):
            raise FormatError(f"mask data ends before frame {t}", base + pos, "masks")
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + 4 * count > len(buf):
            raise FormatError(f"mask data for frame {t} is truncated", base + pos, "masks")
        lines.append(np.frombuffer(buf, dtype=_U4, count=count, offset=pos).astype(np.int64))
        pos += 4 * count
    if pos != len(buf):
        raise FormatError("trailing bytes after mask data", base + pos, "masks")
    return SamplingMaskSet(h, w, tuple(lines), center_lines)


def _write(path, header: dict, sections: list[tuple[str, bytes]]) -> None:
    entries = []
    offset = 0
    for name, payload in sections:
        entries.append({"name": name, "offset": offset, "byte_len": len(payload)})
        offset += len(payload)
    header = dict(header, sections=entries)
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(hdr)))
            f.write(hdr)
            for _, payload in sections:
                f.write(payload)
    except OSError as e:
        raise OSError(f"cannot write container {path}: {e}") from e


def _read(path) -> tuple[dict, dict[str, tuple[bytes, int]]]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4:
        raise FormatError("file too short for magic and header length", len(blob))
    magic = blob[: len(MAGIC)]
    if magic != MAGIC:
        if magic[:4] == _MAGIC_STEM and magic[4:].isdigit():
            raise FormatError(f"unsupported container version {magic[4:].decode()}", 4)
        bad = next(i for i in range(len(MAGIC)) if magic[i] != MAGIC[i])
        raise FormatError(f"bad magic bytes {magic!r}", bad)
    (hdr_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    hdr_start = len(MAGIC) + 4
    if hdr_start + hdr_len > len(blob):
        raise FormatError("header is truncated", len(blob))
    try:
        header = json.loads(blob[hdr_start : hdr_start + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"header is not valid JSON ({e})", hdr_start) from e
    base = hdr_start + hdr_len
    sections = {}
    for s in header.get("sections", []):
        start = base + int(s["offset"])
        end = start + int(s["byte_len"])
        if end > len(blob):
            raise FormatError(
                f"section truncated: expected {s['byte_len']} bytes, found {max(len(blob) - start, 0)}",
                min(start, len(blob)),
                s["name"],
            )
        sections[s["name"]] = (blob[start:end], start)
    return header, sections


def _array(sections, name, dtype, shape):
    buf, start = sections[name]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(buf) != expected:
        raise FormatError(f"expected {expected} bytes, header declares {len(buf)}", start, name)
    return np.frombuffer(buf, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def write_dataset(
    path,
    kspace: KSpaceSet,
    coils: CoilMaps,
    masks: SamplingMaskSet,
    reference: Optional[ImageSequence] = None,
    gt_motion: Optional[MotionFieldSet] = None,
) -> None:
    """Write a dataset container; dimensions must agree across all parts."""
    n, q, h, w = kspace.data.shape
    if coils.data.shape != (q, h, w):
        raise ValueError(f"coil maps shape {coils.data.shape} does not match kspace {(q, h, w)}")
    if masks.n_frames != n or masks.shape != (h, w):
        raise ValueError(f"masks {(masks.n_frames, *masks.shape)} do not match kspace {(n, h, w)}")
    if reference is not None and reference.frames.shape != (n, h, w):
        raise ValueError(f"reference shape {reference.frames.shape} does not match {(n, h, w)}")
    if gt_motion is not None and gt_motion.fields.shape != (n, n, 2, h, w):
        raise ValueError(f"motion shape {gt_motion.fields.shape} does not match {(n, n, 2, h, w)}")

    sections = [
        ("kspace", kspace.data.astype(_C16).tobytes()),
        ("coils", coils.data.astype(_C16).tobytes()),
        ("support", coils.support.astype(np.uint8).tobytes()),
        ("masks", _encode_masks(masks)),
    ]
    if reference is not None:
        sections.append(("reference", reference.frames.astype(_C16).tobytes()))
    if gt_motion is not None:
        sections.append(("gt_motion", gt_motion.fields.astype(_F8).tobytes()))
    header = {"kind": "dataset", "N": n, "Q": q, "H": h, "W": w, "center_lines": masks.center_lines}
    _write(path, header, sections)


def read_dataset(path, check: bool = True) -> Dataset:
    """Read a dataset container and re-validate every type invariant.

    Optional parts that were not written come back as ``None``.
    """
    header, sections = _read(path)
    if header.get("kind", "dataset") != "dataset":
        raise FormatError(f"expected a dataset container, found kind {header.get('kind')!r}", len(MAGIC) + 4)
    for name in ("kspace", "coils", "support", "masks"):
        if name not in sections:
            raise FormatError("required section missing", len(MAGIC) + 4, name)
    n, q, h, w = (int(header[k]) for k in ("N", "Q", "H", "W"))
    kspace = KSpaceSet(_array(sections, "kspace", _C16, (n, q, h, w)))
    coil_data = _array(sections, "coils", _C16, (q, h, w))
    support = _array(sections, "support", np.dtype("u1"), (h, w))
    if np.any(support > 1):
        raise FormatError("support bytes must be 0 or 1", sections["support"][1], "support")
    coils = CoilMaps(coil_data, support.astype(bool))
    mbuf, mstart = sections["masks"]
    masks = _decode_masks(mbuf, n, h, w, int(header.get("center_lines", 0)), mstart)
    reference = None
    if "reference" in sections:
        reference = ImageSequence(_array(sections, "reference", _C16, (n, h, w)))
    gt_motion = None
    if "gt_motion" in sections:
        gt_motion = MotionFieldSet(_array(sections, "gt_motion", _F8, (n, n, 2, h, w)))
    ds = Dataset(kspace, coils, masks, reference, gt_motion)
    if check:
        violations = validate(ds)
        if violations:
            raise ValidationError(violations)
    return ds


def write_result(path, recon: ImageSequence, motion: Optional[MotionFieldSet] = None, meta: Optional[dict] = None) -> None:
    n, h, w = recon.frames.shape
    sections = [("recon", recon.frames.astype(_C16).tobytes())]
    if motion is not None:
        if motion.fields.shape != (n, n, 2, h, w):
            raise ValueError(f"motion shape {motion.fields.shape} does not match {(n, n, 2, h, w)}")
        sections.append(("motion", motion.fields.astype(_F8).tobytes()))
    header = {"kind": "result", "N": n, "Q": 0, "H": h, "W": w, "center_lines": 0, "meta": meta or {}}
    _write(path, header, sections)


def read_result(path) -> ReconResult:
    header, sections = _read(path)
    if header.get("kind") != "result":
        raise FormatError(f"expected a result container, found kind {header.get('kind')!r}", len(MAGIC) + 4)
    if "recon" not in sections:
        raise FormatError("required section missing", len(MAGIC) + 4, "recon")
    n, h, w = (int(header[k]) for k in ("N", "H", "W"))
    recon = ImageSequence(_array(sections, "recon", _C16, (n, h, w)))
    violations = validate_images(recon)
    motion = None
    if "motion" in sections:
        motion = MotionFieldSet(_array(sections, "motion", _F8, (n, n, 2, h, w)))
        violations += validate_motion(motion)
    if violations:
        raise ValidationError(violations)
    return ReconResult(recon, motion, header.get("meta", {}))


def is_result_file(path) -> bool:
    header, _ = _read(path)
    return header.get("kind") == "result"


__all__ = [
    "FormatError",
    "MAGIC",
    "ReconResult",
    "read_dataset",
    "read_result",
    "write_dataset",
    "write_result",
    "is_result_file",
]
