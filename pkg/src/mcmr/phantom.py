"""Synthetic dynamic phantom, coil maps, k-t masks and k-space simulation.

Frame ``t`` of the phantom samples an analytic reference image at
``psi_t(p)``, where ``psi_t`` is a smooth radial contraction about the heart
centre plus a small rigid shift along the rows. Both parts are invertible in
closed form (the radial profile up to a monotone scalar root), so the
displacement that backward-warps frame ``t1`` onto frame ``t2`` is

    u(p) = psi_t1^{-1}(psi_t2(p)) - p
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CoilMaps, ImageSequence, KSpaceSet, MotionFieldSet, SamplingMaskSet
from .operators import encode_frame

# width (px) of the tanh ramp on ellipse edges
EDGE_WIDTH = 1.0
# peak rigid shift relative to the radial amplitude
SHIFT_FRACTION = 0.25


@dataclass(frozen=True)
class PhantomSpec:
    n_frames: int = 25
    height: int = 128
    width: int = 128
    motion_amplitude: float = 3.0
    n_ellipses: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError(f"n_frames must be >= 2, got {self.n_frames}")
        if self.motion_amplitude < 0:
            raise ValueError(f"motion_amplitude must be >= 0, got {self.motion_amplitude}")
        if self.height < 8 or self.width < 8:
            raise ValueError("phantom grid must be at least 8 x 8")


def _soft_ellipse(qy, qx, cy, cx, ay, ax, angle=0.0):
    ca, sa = np.cos(angle), np.sin(angle)
    dy, dx = qy - cy, qx - cx
    ry = (ca * dy + sa * dx) / ay
    rx = (-sa * dy + ca * dx) / ax
    rho = np.sqrt(ry**2 + rx**2)
    return 0.5 * (1.0 - np.tanh((rho - 1.0) * min(ay, ax) / EDGE_WIDTH))


class _Geometry:
    """Analytic reference image and its per-phase deformation."""

    def __init__(self, spec: PhantomSpec):
        h, w = spec.height, spec.width
        self.spec = spec
        self.size = min(h, w)
        self.center = np.array([0.48 * h, 0.52 * w])
        self.sigma = 0.18 * self.size
        self.a_max = spec.motion_amplitude * np.exp(0.5) / self.sigma
        # keeps the radial map monotone: min_r w(r)(1 - r^2/s^2) = -2 exp(-1.5)
        if self.a_max * 2.0 * np.exp(-1.5) >= 0.9:
            raise ValueError(
                f"motion amplitude {spec.motion_amplitude} px too large for a {h}x{w} grid"
            )
        self.shift_max = SHIFT_FRACTION * spec.motion_amplitude

        rng = np.random.default_rng(spec.seed)
        body = (0.5 * h, 0.5 * w, 0.40 * h, 0.44 * w, 0.0, 0.35)
        cy, cx = self.center
        myo = (cy, cx, 0.17 * self.size, 0.15 * self.size, 0.2, 0.65)
        pool = (cy, cx, 0.10 * self.size, 0.085 * self.size, 0.2, 1.0)
        blobs = []
        for _ in range(spec.n_ellipses):
            ang = rng.uniform(0, 2 * np.pi)
            rad = rng.uniform(0.05, 0.30) * self.size
            by = cy + rad * np.sin(ang)
            bx = cx + rad * np.cos(ang)
            ay = rng.uniform(0.025, 0.06) * self.size
            ax = rng.uniform(0.025, 0.06) * self.size
            blobs.append((by, bx, ay, ax, rng.uniform(0, np.pi), rng.uniform(0.1, 0.9)))
        self.layers = [body, myo, pool] + blobs

    def phase_params(self, t: float):
        s = np.sin(np.pi * t / self.spec.n_frames) ** 2
        a = self.a_max * s
        b = self.shift_max * np.sin(2 * np.pi * t / self.spec.n_frames)
        return a, b

    def _window(self, r):
        return np.exp(-(r**2) / (2 * self.sigma**2))

    def _radial(self, vy, vx, a):
        r = np.hypot(vy, vx)
        g = 1.0 + a * self._window(r)
        return vy * g, vx * g

    def _radial_inv(self, vy, vx, a):
        target = np.hypot(vy, vx)
        if a == 0:
            return vy.copy(), vx.copy()
        r = target / (1.0 + a * self._window(target))
        for _ in range(50):
            wr = self._window(r)
            f = r * (1.0 + a * wr) - target
            df = 1.0 + a * wr * (1.0 - r**2 / self.sigma**2)
            step = f / df
            r = np.maximum(r - step, 0.0)
            if np.max(np.abs(step)) < 1e-14 * max(1.0, float(np.max(target))):
                break
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(target > 0, r / target, 1.0 / (1.0 + a))
        return vy * ratio, vx * ratio

    def to_reference(self, py, px, t):
        """``psi_t``: frame-``t`` coordinates to reference coordinates."""
        a, b = self.phase_params(t)
        cy, cx = self.center
        vy, vx = self._radial(py - b - cy, px - cx, a)
        return cy + vy, cx + vx

    def from_reference(self, qy, qx, t):
        a, b = self.phase_params(t)
        cy, cx = self.center
        vy, vx = self._radial_inv(qy - cy, qx - cx, a)
        return cy + b + vy, cx + vx

    def image(self, qy, qx) -> np.ndarray:
        mag = np.zeros_like(qy)
        for cy, cx, ay, ax, ang, val in self.layers:
            m = _soft_ellipse(qy, qx, cy, cx, ay, ax, ang)
            mag = mag * (1 - m) + val * m
        h, w = self.spec.height, self.spec.width
        ny = (qy - 0.5 * h) / (0.5 * h)
        nx = (qx - 0.5 * w) / (0.5 * w)
        phase = 0.5 * np.pi * (0.6 * ny + 0.3 * nx + 0.4 * ny * nx)
        return mag * np.exp(1j * phase)


def _grid(h, w):
    return np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")


def phantom_frame(spec: PhantomSpec, t: float) -> np.ndarray:
    """Phantom at (possibly non-integer or out-of-cycle) phase ``t``."""
    geo = _Geometry(spec)
    py, px = _grid(spec.height, spec.width)
    return geo.image(*geo.to_reference(py, px, t))


def make_phantom(spec: PhantomSpec = PhantomSpec()) -> tuple[ImageSequence, MotionFieldSet]:
    """Dynamic phantom and its exact pairwise displacement fields."""
    geo = _Geometry(spec)
    n, h, w = spec.n_frames, spec.height, spec.width
    py, px = _grid(h, w)
    frames = np.empty((n, h, w), dtype=np.complex128)
    ref_coords = []
    for t in range(n):
        qy, qx = geo.to_reference(py, px, t)
        ref_coords.append((qy, qx))
        frames[t] = geo.image(qy, qx)
    fields = np.zeros((n, n, 2, h, w))
    for t2 in range(n):
        qy, qx = ref_coords[t2]
        for t1 in range(n):
            if t1 == t2:
                continue
            sy, sx = geo.from_reference(qy, qx, t1)
            fields[t1, t2, 0] = sy - py
            fields[t1, t2, 1] = sx - px
    if np.max(np.abs(fields), initial=0.0) > max(h, w):
        raise ValueError("phantom displacement exceeds the grid size")
    return ImageSequence(frames), MotionFieldSet(fields)


def heart_roi(spec: PhantomSpec, margin: float = 1.6) -> np.ndarray:
    """Disc around the moving region, used for end-point-error statistics."""
    geo = _Geometry(spec)
    py, px = _grid(spec.height, spec.width)
    r = np.hypot(py - geo.center[0], px - geo.center[1])
    return r <= margin * geo.sigma


def make_coil_maps(n_coils: int, height: int, width: int, support=None) -> CoilMaps:
    """Smooth complex Gaussian-profile coils around the field of view.

    The maps are normalised so that ``sum_q |c_q|^2 = 1`` on ``support``
    (the full grid by default) and vanish outside it.
    """
    if n_coils < 1:
        raise ValueError(f"need at least one coil, got {n_coils}")
    py, px = _grid(height, width)
    cy, cx = 0.5 * (height - 1), 0.5 * (width - 1)
    size = min(height, width)
    ring = 0.55 * size
    sigma = 0.45 * size
    maps = np.empty((n_coils, height, width), dtype=np.complex128)
    for q in range(n_coils):
        ang = 2 * np.pi * q / n_coils
        qy, qx = cy + ring * np.sin(ang), cx + ring * np.cos(ang)
        prof = np.exp(-((py - qy) ** 2 + (px - qx) ** 2) / (2 * sigma**2))
        phase = ang + 2.0 * np.pi * (np.sin(ang) * (py - cy) + np.cos(ang) * (px - cx)) / (4.0 * size) if q else 0.0
        maps[q] = prof * np.exp(1j * phase)
    support = np.ones((height, width), bool) if support is None else np.asarray(support, bool)
    norm = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    maps = np.where(support, maps / norm, 0)
    return CoilMaps(maps, support)


# down-weighting of rows sampled in a neighbouring frame
NEIGHBOR_PENALTY = 0.1


def line_density(height: int) -> np.ndarray:
    """Variable-density weights over ky rows, highest at the centre."""
    k = np.arange(height)
    d = np.abs(k - height // 2) / (height / 2)
    return 1.0 - 0.5 * d


def make_masks(n_frames: int, height: int, width: int, accel: float, center_lines: int = 4,
               seed: int = 0) -> SamplingMaskSet:
    """Seeded variable-density k-t pattern with ``round(H / accel)`` rows per frame."""
    if accel < 1:
        raise ValueError(f"acceleration must be >= 1, got {accel}")
    budget = int(round(height / accel))
    if accel == 1:
        return SamplingMaskSet(height, width, tuple(np.arange(height) for _ in range(n_frames)), center_lines)
    if center_lines < 0 or center_lines >= height / accel or budget < max(center_lines, 1):
        raise ValueError(
            f"infeasible sampling budget: {budget} rows per frame with {center_lines} center lines"
        )
    rng = np.random.default_rng(seed)
    start = height // 2 - center_lines // 2
    band = np.arange(start, start + center_lines)
    density = line_density(height)
    density[band] = 0.0
    lines = []
    for t in range(n_frames):
        wts = density.copy()
        neighbours = [lines[t - 1]] if t > 0 else []
        if t == n_frames - 1 and n_frames > 2:
            neighbours.append(lines[0])
        for nb in neighbours:
            wts[nb] *= NEIGHBOR_PENALTY
        wts[band] = 0.0
        extra = rng.choice(height, size=budget - center_lines, replace=False, p=wts / wts.sum())
        lines.append(np.sort(np.concatenate([band, extra])))
    return SamplingMaskSet(height, width, tuple(lines), center_lines)


def simulate_kspace(reference: ImageSequence, coils: CoilMaps, masks: SamplingMaskSet,
                    noise_sigma: float = 0.0, seed: int = 0) -> KSpaceSet:
    """Retrospectively undersampled multi-coil k-space with masked complex noise."""
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    n, h, w = reference.frames.shape
    if coils.shape != (h, w) or masks.n_frames != n or masks.shape != (h, w):
        raise ValueError("reference, coil maps and masks have inconsistent dimensions")
    rng = np.random.default_rng(seed)
    q = coils.n_coils
    out = np.empty((n, q, h, w), dtype=np.complex128)
    for t in range(n):
        k = encode_frame(reference.frames[t], coils, masks.lines[t])
        if noise_sigma > 0:
            noise = noise_sigma * (rng.standard_normal((q, h, w)) + 1j * rng.standard_normal((q, h, w)))
            k += np.where(masks.row_mask(t)[None, :, None], noise, 0)
        out[t] = k
    return KSpaceSet(out)
