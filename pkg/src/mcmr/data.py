"""Shared domain types for dynamic multi-coil reconstruction.

Single images are plain ``complex128`` arrays of shape ``(H, W)`` and a
single displacement field is a ``float64`` array of shape ``(2, H, W)``
holding ``(dy, dx)`` in pixels. The containers below group those arrays and
carry the invariants that the rest of the package relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

MIN_SIZE = 8
COIL_NORM_TOL = 1e-6


class ValidationError(ValueError):
    """Raised when an object violates one or more type invariants."""

    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        msg = "; ".join(str(v) for v in self.violations)
        super().__init__(msg)


@dataclass(frozen=True)
class Violation:
    type_name: str
    field: str
    value: object
    message: str

    def __str__(self) -> str:
        return f"{self.type_name}.{self.field}: {self.message} (got {self.value!r})"


def _readonly(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ImageSequence:
    """N complex frames on a common H x W grid, stored as ``(N, H, W)``."""

    frames: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "frames", _readonly(self.frames, np.complex128))
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (N, H, W), got shape {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]

    def __getitem__(self, t: int) -> np.ndarray:
        return self.frames[t]

    def __len__(self) -> int:
        return self.n_frames

    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)


@dataclass(frozen=True, eq=False)
class KSpaceSet:
    """Cartesian k-space samples of shape ``(N, Q, H, W)``, zero where unsampled."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _readonly(self.data, np.complex128))
        if self.data.ndim != 4:
            raise ValueError(f"kspace must be (N, Q, H, W), got shape {self.data.shape}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_coils(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[2:]


@dataclass(frozen=True, eq=False)
class CoilMaps:
    """Coil sensitivities ``(Q, H, W)`` with a binary object support ``(H, W)``."""

    data: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _readonly(self.data, np.complex128))
        object.__setattr__(self, "support", _readonly(self.support, bool))
        if self.data.ndim != 3:
            raise ValueError(f"coil maps must be (Q, H, W), got shape {self.data.shape}")
        if self.support.shape != self.data.shape[1:]:
            raise ValueError(
                f"support shape {self.support.shape} does not match maps {self.data.shape[1:]}"
            )

    @property
    def n_coils(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1:]


@dataclass(frozen=True, eq=False)
class SamplingMaskSet:
    """Per-frame sets of sampled ky rows; every readout row is fully sampled."""

    height: int
    width: int
    lines: tuple
    center_lines: int = 0

    def __post_init__(self):
        lines = tuple(_readonly(np.unique(np.asarray(l, dtype=np.int64)), np.int64) for l in self.lines)
        object.__setattr__(self, "lines", lines)

    @property
    def n_frames(self) -> int:
        return len(self.lines)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def row_mask(self, t: int) -> np.ndarray:
        """Boolean ky-row selection of frame ``t``, shape ``(H,)``."""
        m = np.zeros(self.height, dtype=bool)
        m[self.lines[t]] = True
        return m

    def row_masks(self) -> np.ndarray:
        return np.stack([self.row_mask(t) for t in range(self.n_frames)])

    def center_band(self) -> np.ndarray:
        start = self.height // 2 - self.center_lines // 2
        return np.arange(start, start + self.center_lines)

    def acceleration(self) -> float:
        counts = [len(l) for l in self.lines]
        return self.height / float(np.mean(counts))


@dataclass(frozen=True, eq=False)
class MotionFieldSet:
    """All pairwise displacement fields, shape ``(N, N, 2, H, W)``.

    Entry ``[t1, t2]`` is the field on the grid of frame ``t2`` that warps
    frame ``t1`` onto it by backward sampling; component 0 is the row
    displacement, component 1 the column displacement.
    """

    fields: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "fields", _readonly(self.fields, np.float64))
        f = self.fields
        if f.ndim != 5 or f.shape[0] != f.shape[1] or f.shape[2] != 2:
            raise ValueError(f"motion fields must be (N, N, 2, H, W), got shape {f.shape}")

    @classmethod
    def zeros(cls, n_frames: int, height: int, width: int) -> "MotionFieldSet":
        return cls(np.zeros((n_frames, n_frames, 2, height, width)))

    @property
    def n_frames(self) -> int:
        return self.fields.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.fields.shape[3:]

    def __getitem__(self, idx) -> np.ndarray:
        return self.fields[idx]


@dataclass(frozen=True)
class ReconConfig:
    """Settings of the alternating reconstruction.

    ``lam`` weights the previous-image prior as ``1/(2*lam) * ||x - x_prev||^2``.
    """

    lam: float = 2.0
    unroll_iters: int = 3
    cg_max_iters: int = 20
    cg_tol: float = 1e-6
    psnr_stop_delta: float = 0.1
    first_block_cg_iters: int = 10
    threads: int = 1
    keep_motion_history: bool = False

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if self.unroll_iters < 1:
            raise ValueError(f"unroll_iters must be >= 1, got {self.unroll_iters}")
        if not self.cg_tol > 0:
            raise ValueError(f"cg_tol must be > 0, got {self.cg_tol}")
        if not self.psnr_stop_delta >= 0:
            raise ValueError(f"psnr_stop_delta must be >= 0, got {self.psnr_stop_delta}")
        if self.cg_max_iters < 1 or self.first_block_cg_iters < 1:
            raise ValueError("CG iteration budgets must be >= 1")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")


@dataclass(frozen=True)
class MotionConfig:
    """Weights of the motion energy and settings of the coarse-to-fine solver.

    Magnitude images are rescaled so that the largest magnitude of the
    sequence equals ``intensity_scale`` before the data term is evaluated.
    """

    alpha: float = 10.0
    beta: float = 10.0
    gamma: float = 0.6
    charbonnier_eps: float = 1e-12
    charbonnier_exp: float = 0.45
    pyramid_levels: int = 4
    warps_per_level: int = 3
    inner_iters: int = 30
    step_size: float = 1.0
    intensity_scale: float = 4000.0
    tv_eps: float = 0.05
    warm_start: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.pyramid_levels < 1:
            raise ValueError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if self.warps_per_level < 1 or self.inner_iters < 0:
            raise ValueError("warps_per_level must be >= 1 and inner_iters >= 0")
        if not self.step_size > 0 or not self.intensity_scale > 0:
            raise ValueError("step_size and intensity_scale must be > 0")


class Dataset(NamedTuple):
    kspace: KSpaceSet
    coils: CoilMaps
    masks: SamplingMaskSet
    reference: Optional[ImageSequence] = None
    gt_motion: Optional[MotionFieldSet] = None


def _finite(a: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(a.view(np.float64) if np.iscomplexobj(a) else a)))


def validate_images(x: ImageSequence, name: str = "ImageSequence") -> list[Violation]:
    out = []
    n, h, w = x.frames.shape
    if n < 2:
        out.append(Violation(name, "n_frames", n, "need at least 2 frames"))
    if h < MIN_SIZE or w < MIN_SIZE:
        out.append(Violation(name, "shape", (h, w), f"height and width must be >= {MIN_SIZE}"))
    if not _finite(x.frames):
        bad = int(np.count_nonzero(~np.isfinite(x.frames)))
        out.append(Violation(name, "frames", bad, "non-finite samples"))
    return out


def validate_coils(c: CoilMaps) -> list[Violation]:
    out = []
    if c.n_coils < 1:
        out.append(Violation("CoilMaps", "n_coils", c.n_coils, "need at least one coil"))
        return out
    if not _finite(c.data):
        out.append(Violation("CoilMaps", "data", "non-finite", "non-finite samples"))
        return out
    ss = np.sum(np.abs(c.data) ** 2, axis=0)
    if np.any(c.support):
        dev = float(np.max(np.abs(ss[c.support] - 1.0)))
        if dev > COIL_NORM_TOL:
            out.append(Violation("CoilMaps", "data", dev, "coil normalization violated"))
    outside = ~c.support
    if np.any(outside) and np.any(c.data[:, outside] != 0):
        n_bad = int(np.count_nonzero(np.any(c.data[:, outside] != 0, axis=0)))
        out.append(Violation("CoilMaps", "support", n_bad, "nonzero sensitivity outside support"))
    return out


def validate_masks(m: SamplingMaskSet) -> list[Violation]:
    out = []
    band = set(m.center_band().tolist()) if m.center_lines > 0 else set()
    for t, lines in enumerate(m.lines):
        if len(lines) == 0:
            out.append(Violation("SamplingMaskSet", f"lines[{t}]", 0, f"frame {t} has no sampled lines"))
            continue
        if lines[0] < 0 or lines[-1] >= m.height:
            out.append(
                Violation("SamplingMaskSet", f"lines[{t}]", (int(lines[0]), int(lines[-1])),
                          f"frame {t} line index outside [0, {m.height})")
            )
        missing = band - set(lines.tolist())
        if missing:
            out.append(
                Violation("SamplingMaskSet", f"lines[{t}]", sorted(missing),
                          f"frame {t} misses center band rows")
            )
    return out


def validate_motion(u: MotionFieldSet) -> list[Violation]:
    out = []
    f = u.fields
    if not _finite(f):
        out.append(Violation("MotionFieldSet", "fields", "non-finite", "non-finite displacements"))
        return out
    h, w = u.shape
    bound = max(h, w)
    peak = float(np.max(np.abs(f))) if f.size else 0.0
    if peak > bound:
        out.append(Violation("MotionField", "dy/dx", peak, f"displacement exceeds sanity bound {bound}"))
    diag = f[np.arange(u.n_frames), np.arange(u.n_frames)]
    if np.any(diag != 0):
        ts = [int(t) for t in np.nonzero(np.any(diag != 0, axis=(1, 2, 3)))[0]]
        out.append(Violation("MotionFieldSet", "fields", ts, "diagonal fields must be zero"))
    return out


def validate_kspace(y: KSpaceSet, masks: SamplingMaskSet) -> list[Violation]:
    out = []
    if not _finite(y.data):
        out.append(Violation("KSpaceSet", "data", "non-finite", "non-finite samples"))
    rows = masks.row_masks()
    for t in range(min(y.n_frames, masks.n_frames)):
        off = y.data[t][:, ~rows[t], :]
        if np.any(off != 0):
            q, r, _ = np.nonzero(off)
            row = int(np.nonzero(~rows[t])[0][r[0]])
            out.append(
                Violation("KSpaceSet", "data", {"frame": t, "coil": int(q[0]), "row": row},
                          "nonzero sample at unsampled location")
            )
    return out


def validate(dataset: Dataset) -> list[Violation]:
    """Check every type invariant of a dataset and return the violations found.

    An empty list means the dataset is valid. Nothing is raised for
    invariant failures.
    """
    y, coils, masks, ref, motion = dataset
    out: list[Violation] = []
    n, q, h, w = y.data.shape
    if h < MIN_SIZE or w < MIN_SIZE:
        out.append(Violation("KSpaceSet", "shape", (h, w), f"height and width must be >= {MIN_SIZE}"))
    if n < 2:
        out.append(Violation("KSpaceSet", "n_frames", n, "need at least 2 frames"))
    if coils.data.shape != (q, h, w):
        out.append(Violation("CoilMaps", "shape", coils.data.shape, f"expected {(q, h, w)}"))
    if masks.n_frames != n or masks.shape != (h, w):
        out.append(
            Violation("SamplingMaskSet", "shape", (masks.n_frames, *masks.shape), f"expected {(n, h, w)}")
        )
    if ref is not None and ref.frames.shape != (n, h, w):
        out.append(Violation("ImageSequence", "shape", ref.frames.shape, f"expected {(n, h, w)}"))
    if motion is not None and motion.fields.shape != (n, n, 2, h, w):
        out.append(Violation("MotionFieldSet", "shape", motion.fields.shape, f"expected {(n, n, 2, h, w)}"))
    if out:
        return out
    out += validate_coils(coils)
    out += validate_masks(masks)
    out += validate_kspace(y, masks)
    if ref is not None:
        out += validate_images(ref, "ImageSequence")
    if motion is not None:
        out += validate_motion(motion)
    return out
