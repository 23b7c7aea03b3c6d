"""Group-wise dense motion estimation by coarse-to-fine energy minimisation.

The energy of a set of fields ``u[t1, t2]`` on a sequence ``x`` is

    sum_{t1,t2} sum_p rho(|U(u[t1,t2]) x[t1] - x[t2]|)                  (data)
    + alpha * sum_{t1,t2} sum_{d in y,x} ||grad_d u[t1,t2]||_1          (spatial)
    + beta * sum_{t1} ||grad_t2 u[t1, :]||_1                             (temporal)

with the Charbonnier penalty ``rho(v) = (v^2 + eps)^exp``. Images are
rescaled so the largest magnitude of the sequence is ``cfg.intensity_scale``.
Pairs are solved independently with a warping scheme on an image pyramid;
temporal coupling inside a group comes from warm-starting each pair with the
field of its temporal neighbour.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import ndimage

from .data import ImageSequence, MotionConfig, MotionFieldSet
from .operators import BilinearWarp

log = logging.getLogger(__name__)

MIN_LEVEL_SIZE = 8


def charbonnier(v, eps: float = 1e-12, exp: float = 0.45):
    """Robust penalty ``(v^2 + eps)^exp``."""
    v = np.asarray(v, dtype=np.float64)
    return (v * v + eps) ** exp


@dataclass(frozen=True)
class MotionEnergyBreakdown:
    data_term: float
    spatial_term: float
    temporal_term: float
    alpha: float
    beta: float

    @property
    def total(self) -> float:
        return self.data_term + self.alpha * self.spatial_term + self.beta * self.temporal_term

    def to_dict(self) -> dict:
        return {
            "data_term": self.data_term,
            "spatial_term": self.spatial_term,
            "temporal_term": self.temporal_term,
            "total": self.total,
        }


def intensity_factor(x: np.ndarray, cfg: MotionConfig) -> float:
    peak = float(np.max(np.abs(x))) if np.size(x) else 0.0
    return cfg.intensity_scale / peak if peak > 0 else 1.0


def _forward_diff(v: np.ndarray, axis: int) -> np.ndarray:
    d = np.zeros_like(v)
    sl_hi = [slice(None)] * v.ndim
    sl_lo = [slice(None)] * v.ndim
    sl_hi[axis] = slice(1, None)
    sl_lo[axis] = slice(None, -1)
    d[tuple(sl_lo)] = v[tuple(sl_hi)] - v[tuple(sl_lo)]
    return d


def spatial_tv(u: np.ndarray) -> np.ndarray:
    """Anisotropic l1 norm of forward differences of ``(..., 2, H, W)`` fields."""
    return np.abs(_forward_diff(u, -2)).sum(axis=(-3, -2, -1)) + np.abs(_forward_diff(u, -1)).sum(axis=(-3, -2, -1))


def data_term(src: np.ndarray, tgt: np.ndarray, u: np.ndarray, cfg: MotionConfig) -> np.ndarray:
    """Charbonnier data term per pair for batched, already scaled images."""
    warped = BilinearWarp(u).apply(src)
    return charbonnier(np.abs(warped - tgt), cfg.charbonnier_eps, cfg.charbonnier_exp).sum(axis=(-2, -1))


def motion_energy(u_set: MotionFieldSet, x_ref, cfg: MotionConfig) -> MotionEnergyBreakdown:
    """Evaluate the three energy terms of a full motion set on ``x_ref``.

    ``x_ref`` may be complex (the data term then uses the modulus of the
    complex difference) or a real magnitude sequence.
    """
    x = x_ref.frames if isinstance(x_ref, ImageSequence) else np.asarray(x_ref)
    f = u_set.fields
    n = f.shape[0]
    if x.shape != (n,) + f.shape[3:]:
        raise ValueError(f"images {x.shape} do not match motion set {f.shape}")
    x = x * intensity_factor(x, cfg)
    data = 0.0
    for t1 in range(n):
        data += float(data_term(x[t1], x, f[t1], cfg).sum())
    spatial = float(spatial_tv(f).sum())
    temporal = float(np.abs(np.diff(f, axis=1)).sum())
    return MotionEnergyBreakdown(data, spatial, temporal, cfg.alpha, cfg.beta)


def pair_energy(src, tgt, u, cfg: MotionConfig, factor: Optional[float] = None) -> float:
    """Data plus weighted spatial energy of a single pair (magnitudes)."""
    s, t = np.abs(src), np.abs(tgt)
    if factor is None:
        factor = intensity_factor(np.stack([s, t]), cfg)
    return float(data_term(s * factor, t * factor, u, cfg) + cfg.alpha * spatial_tv(u))


def weighted_loss(per_iter_losses: Sequence[float], gamma: float) -> float:
    """``sum_i gamma^(I-i) L_i`` over the iterations ``i = 1..I``."""
    losses = list(per_iter_losses)
    if not losses:
        raise ValueError("need at least one loss value")
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    n = len(losses)
    return float(sum(gamma ** (n - i) * l for i, l in enumerate(losses, start=1)))


def _n_levels(shape, cfg: MotionConfig) -> int:
    size = min(shape)
    levels = 1
    while levels < cfg.pyramid_levels and size / 2**levels >= MIN_LEVEL_SIZE:
        levels += 1
    return levels


def _downsample(img: np.ndarray) -> np.ndarray:
    sm = ndimage.gaussian_filter(img, sigma=(0,) * (img.ndim - 2) + (0.8, 0.8), mode="nearest")
    h, w = img.shape[-2:]
    out_shape = ((h + 1) // 2, (w + 1) // 2)
    zoom = (1,) * (img.ndim - 2) + (out_shape[0] / h, out_shape[1] / w)
    return ndimage.zoom(sm, zoom, order=1, mode="nearest", grid_mode=True)


def _resize_flow(u: np.ndarray, shape) -> np.ndarray:
    """Bilinear resize of ``(B, 2, h, w)`` fields with displacement rescaling."""
    h, w = u.shape[-2:]
    if (h, w) == tuple(shape):
        return u.copy()
    sy, sx = shape[0] / h, shape[1] / w
    out = ndimage.zoom(u, (1, 1, sy, sx), order=1, mode="nearest", grid_mode=True)
    out[:, 0] *= sy
    out[:, 1] *= sx
    return out


def _grad(img: np.ndarray):
    gy = np.zeros_like(img)
    gx = np.zeros_like(img)
    gy[..., 1:-1, :] = 0.5 * (img[..., 2:, :] - img[..., :-2, :])
    gx[..., :, 1:-1] = 0.5 * (img[..., :, 2:] - img[..., :, :-2])
    return gy, gx


def _tv_grad_and_diag(v: np.ndarray, eps: float):
    """Gradient of the smoothed anisotropic TV and its Jacobi diagonal."""
    grad = np.zeros_like(v)
    diag = np.zeros_like(v)
    for axis in (-2, -1):
        g = _forward_diff(v, axis)
        phi = 1.0 / np.sqrt(g * g + eps * eps)
        # forward-difference adjoint applied to phi * g
        z = phi * g
        grad -= z
        sl_hi = [slice(None)] * v.ndim
        sl_lo = [slice(None)] * v.ndim
        sl_hi[axis] = slice(1, None)
        sl_lo[axis] = slice(None, -1)
        grad[tuple(sl_hi)] += z[tuple(sl_lo)]
        # last row/column has no forward neighbour, so phi there does not couple
        phi_c = phi.copy()
        sl_last = [slice(None)] * v.ndim
        sl_last[axis] = slice(-1, None)
        phi_c[tuple(sl_last)] = 0.0
        diag += phi_c
        diag[tuple(sl_hi)] += phi_c[tuple(sl_lo)]
    return grad, diag


def _refine_level(src, tgt, u, cfg: MotionConfig, n_warps: int, anchor=None):
    """Warping iterations at one pyramid level; ``src``/``tgt`` are ``(B, H, W)``.

    With ``anchor`` (a neighbouring field at this level), the smoothed
    ``beta * |u - anchor|_1`` temporal coupling joins the energy.
    """
    gy_src, gx_src = _grad(src)
    q, eps = cfg.charbonnier_exp, cfg.charbonnier_eps
    couple = anchor is not None and cfg.beta > 0
    for _ in range(n_warps):
        warp = BilinearWarp(u)
        iw = warp.apply(src)
        iy = warp.apply(gy_src)
        ix = warp.apply(gx_src)
        it = iw - tgt
        du = np.zeros_like(u)
        for _ in range(cfg.inner_iters):
            r = it + iy * du[:, 0] + ix * du[:, 1]
            psi = 2.0 * q * (r * r + eps) ** (q - 1.0)
            tv_g, tv_d = _tv_grad_and_diag(u + du, cfg.tv_eps)
            g = cfg.alpha * tv_g
            p = cfg.alpha * tv_d + 1e-9
            if couple:
                dv = u + du - anchor
                phi = cfg.beta / np.sqrt(dv * dv + cfg.tv_eps**2)
                g = g + phi * dv
                p = p + phi
            g[:, 0] += psi * r * iy
            g[:, 1] += psi * r * ix
            p[:, 0] += psi * iy * iy
            p[:, 1] += psi * ix * ix
            du -= cfg.step_size * g / p
        u = u + du
        if not np.all(np.isfinite(u)):
            raise FloatingPointError("non-finite displacement during estimation")
    return u


def _energies(src, tgt, u, cfg, anchor=None):
    e = data_term(src, tgt, u, cfg) + cfg.alpha * spatial_tv(u)
    if anchor is not None:
        e = e + cfg.beta * np.abs(u - anchor).sum(axis=(-3, -2, -1))
    return e


def estimate_batch(src: np.ndarray, tgt: np.ndarray, init: Optional[np.ndarray], cfg: MotionConfig,
                   anchor: Optional[np.ndarray] = None) -> np.ndarray:
    """Estimate fields warping ``src[b]`` onto ``tgt[b]`` for a batch of scaled magnitude pairs.

    ``anchor`` holds already estimated neighbouring fields; when given, the
    energy gains ``beta * |u - anchor|_1``. The returned field never has
    higher energy than ``init`` (or zero).
    """
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    nb, h, w = src.shape
    u0 = np.zeros((nb, 2, h, w)) if init is None else np.array(init, dtype=np.float64)
    levels = _n_levels((h, w), cfg)
    pyr = [(src, tgt)]
    for _ in range(levels - 1):
        s, t = pyr[-1]
        pyr.append((_downsample(s), _downsample(t)))

    best = u0.copy()
    best_e = _energies(src, tgt, u0, cfg, anchor)
    u = _resize_flow(u0, pyr[-1][0].shape[-2:])
    try:
        for lvl in range(levels - 1, -1, -1):
            s, t = pyr[lvl]
            u = _resize_flow(u, s.shape[-2:])
            a = None if anchor is None else _resize_flow(anchor, s.shape[-2:])
            u = _refine_level(s, t, u, cfg, cfg.warps_per_level, a)
    except FloatingPointError as e:
        log.warning("motion estimation stopped early: %s", e)
        return best
    e = _energies(src, tgt, u, cfg, anchor)
    better = e <= best_e
    best[better] = u[better]
    return best


def estimate_pair(src: np.ndarray, tgt: np.ndarray, init: Optional[np.ndarray] = None,
                  cfg: MotionConfig = MotionConfig()) -> np.ndarray:
    """Field ``(2, H, W)`` that backward-warps ``src`` onto ``tgt``."""
    s, t = np.abs(src), np.abs(tgt)
    if s.shape != t.shape:
        raise ValueError(f"image shapes differ: {s.shape} vs {t.shape}")
    factor = intensity_factor(np.stack([s, t]), cfg)
    init_b = None if init is None else np.asarray(init)[None]
    return estimate_batch(s[None] * factor, t[None] * factor, init_b, cfg)[0]


def _walk_order(n: int):
    """Temporal offsets visited outward from the source frame, cyclically."""
    order = []
    for k in range(1, n // 2 + 1):
        order.append((k, k - 1))
        if -k % n != k % n:
            order.append((-k, -(k - 1)))
    return order


def estimate_group(x: ImageSequence, t: int, cfg: MotionConfig = MotionConfig()) -> list:
    """Fields ``u[t -> s]`` for every frame ``s`` of the sequence."""
    return list(_estimate_sources(x, [t], cfg)[0])


def estimate_all(x: ImageSequence, cfg: MotionConfig = MotionConfig()) -> MotionFieldSet:
    """All ``N x N`` fields; the diagonal is exactly zero."""
    return MotionFieldSet(_estimate_sources(x, list(range(x.n_frames)), cfg))


def _estimate_sources(x: ImageSequence, sources: list, cfg: MotionConfig) -> np.ndarray:
    frames = x.frames if isinstance(x, ImageSequence) else np.asarray(x)
    n, h, w = frames.shape
    if n < 2:
        raise ValueError("motion estimation needs at least two frames")
    mag = np.abs(frames) * intensity_factor(frames, cfg)
    src_idx = np.asarray(sources)
    out = np.zeros((len(sources), n, 2, h, w))
    # one batched solve per temporal offset, shared across all sources
    for off, prev in _walk_order(n):
        tgt_idx = (src_idx + off) % n
        prev_idx = (src_idx + prev) % n
        rows = np.arange(len(sources))
        if cfg.warm_start:
            # the neighbour nearer to the source seeds the solve and anchors the temporal term
            prev_u = out[rows, prev_idx]
            out[rows, tgt_idx] = estimate_batch(mag[src_idx], mag[tgt_idx], prev_u, cfg, anchor=prev_u)
        else:
            out[rows, tgt_idx] = estimate_batch(mag[src_idx], mag[tgt_idx], None, cfg)
    out[np.arange(len(sources)), src_idx] = 0.0
    return out


@runtime_checkable
class MotionEstimator(Protocol):
    """Anything that maps ``(sequence, source frame, config)`` to ``N`` fields."""

    def estimate_group(self, x: ImageSequence, t: int, cfg: MotionConfig) -> list: ...


class VariationalEstimator:
    """Default estimator: coarse-to-fine minimisation of the motion energy."""

    def estimate_group(self, x: ImageSequence, t: int, cfg: MotionConfig) -> list:
        return estimate_group(x, t, cfg)

    def estimate_all(self, x: ImageSequence, cfg: MotionConfig) -> MotionFieldSet:
        return estimate_all(x, cfg)


class ZeroMotionEstimator:
    """Degenerate estimator returning identity warps everywhere."""

    def estimate_group(self, x: ImageSequence, t: int, cfg: MotionConfig) -> list:
        n, h, w = x.frames.shape
        return [np.zeros((2, h, w)) for _ in range(n)]


class FixedMotionEstimator:
    """Returns a pre-computed motion set regardless of the images."""

    def __init__(self, motion: MotionFieldSet):
        self.motion = motion

    def estimate_group(self, x: ImageSequence, t: int, cfg: MotionConfig) -> list:
        return list(self.motion.fields[t])

    def estimate_all(self, x: ImageSequence, cfg: MotionConfig) -> MotionFieldSet:
        return self.motion


def run_estimator(estimator: MotionEstimator, x: ImageSequence, cfg: MotionConfig) -> MotionFieldSet:
    """Full motion set from any estimator, enforcing the zero diagonal."""
    if hasattr(estimator, "estimate_all"):
        u = estimator.estimate_all(x, cfg)
        fields = np.array(u.fields)
    else:
        fields = np.stack([np.stack(estimator.estimate_group(x, t, cfg)) for t in range(x.n_frames)])
    n = fields.shape[0]
    fields[np.arange(n), np.arange(n)] = 0.0
    return MotionFieldSet(fields)
