"""Conjugate-gradient SENSE with and without motion compensation.

Each motion-compensated block solves, independently for every source frame
``t1``, the normal equations

    (sum_t2 U^H A_t2^H A_t2 U + 1/(2 lam) I) x = sum_t2 U^H A_t2^H y_t2 + x_prev / (2 lam)

where ``U`` warps frame ``t1`` onto frame ``t2``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.fft as sfft

from .data import CoilMaps, ImageSequence, KSpaceSet, MotionFieldSet, ReconConfig, SamplingMaskSet
from .operators import BilinearWarp, LinearOperator, decode_frame

log = logging.getLogger(__name__)

PLAIN_TOL = 1e-12


@dataclass
class CgReport:
    iterations_run: int = 0
    relative_residual_history: list = field(default_factory=list)
    converged: bool = False
    breakdown: bool = False
    # quadratic objective 1/2 x^H H x - Re(b^H x) after each iterate, starting at x0
    objective_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iterations_run": self.iterations_run,
            "relative_residual_history": [float(r) for r in self.relative_residual_history],
            "converged": self.converged,
            "breakdown": self.breakdown,
        }


def _vdot(a, b) -> complex:
    return np.vdot(a.ravel(), b.ravel())


def cg(
    normal_op: Union[LinearOperator, Callable[[np.ndarray], np.ndarray]],
    rhs: np.ndarray,
    x0: Optional[np.ndarray] = None,
    tol: float = 1e-6,
    max_iters: int = 20,
    track_objective: bool = False,
) -> tuple[np.ndarray, CgReport]:
    """Conjugate gradients for a Hermitian positive semidefinite system.

    Stops once ``||r_k|| / ||rhs|| <= tol`` or after ``max_iters`` steps. A
    non-positive curvature ``p^H H p`` ends the run with ``breakdown`` set
    and the current iterate returned.
    """
    apply = normal_op.apply if isinstance(normal_op, LinearOperator) else normal_op
    rhs = np.asarray(rhs, dtype=np.complex128)
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=np.complex128)
    bnorm = np.linalg.norm(rhs)
    scale = bnorm if bnorm > 0 else 1.0

    hx = apply(x) if np.any(x) else np.zeros_like(x)
    r = rhs - hx
    p = r.copy()
    rr = _vdot(r, r).real
    report = CgReport()
    report.relative_residual_history.append(float(np.sqrt(rr) / scale))
    if track_objective:
        report.objective_history.append(float(0.5 * _vdot(x, hx).real - _vdot(rhs, x).real))

    if not np.isfinite(rr):
        raise FloatingPointError("non-finite right-hand side or initial residual")
    if np.sqrt(rr) <= tol * scale:
        report.converged = True
        return x, report

    for k in range(max_iters):
        hp = apply(p)
        php = _vdot(p, hp).real
        if not php > 1e-30 * max(rr, 1e-300):
            log.warning("CG breakdown at iteration %d (p^H H p = %.3e)", k, php)
            report.breakdown = True
            break
        a = rr / php
        x += a * p
        r -= a * hp
        if track_objective:
            hx = hx + a * hp
            report.objective_history.append(float(0.5 * _vdot(x, hx).real - _vdot(rhs, x).real))
        rr_new = _vdot(r, r).real
        report.iterations_run = k + 1
        report.relative_residual_history.append(float(np.sqrt(rr_new) / scale))
        if np.sqrt(rr_new) <= tol * scale:
            report.converged = True
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, report


def row_dft_matrix(height: int) -> np.ndarray:
    """Centred orthonormal DFT along ky as an explicit ``(H, H)`` matrix."""
    eye = np.eye(height, dtype=np.complex128)
    return sfft.fftshift(sfft.fft(sfft.ifftshift(eye, axes=0), axis=0, norm="ortho"), axes=0)


class EncodingSystem:
    """Pre-factored ``A_t^H A_t`` for all frames of a dataset.

    Because whole readout rows are sampled, ``F^H D_t F`` reduces to a
    projection along ky, ``B_t^H B_t``, with ``B_t`` the sampled rows of the
    centred DFT matrix. Frames with fewer lines are zero-padded to a common
    row count so all frames share one batched matrix product.
    """

    def __init__(self, y: KSpaceSet, coils: CoilMaps, masks: SamplingMaskSet):
        n, q, h, w = y.data.shape
        if coils.data.shape != (q, h, w) or masks.n_frames != n or masks.shape != (h, w):
            raise ValueError("k-space, coil maps and masks have inconsistent dimensions")
        self.n_frames = n
        self.shape = (h, w)
        self.coils = coils.data
        self.coils_conj = np.conj(coils.data)
        # (H, Q, W) layout lets one matrix product cover all coils of a frame
        self._coils_t = np.ascontiguousarray(coils.data.transpose(1, 0, 2))
        self._coils_t_conj = np.conj(self._coils_t)
        fmat = row_dft_matrix(h)
        n_lines = max(len(l) for l in masks.lines)
        basis = np.zeros((n, n_lines, h), dtype=np.complex128)
        for t, lines in enumerate(masks.lines):
            basis[t, : len(lines)] = fmat[lines]
        self.basis = basis
        self.basis_h = np.conj(np.swapaxes(basis, 1, 2)).copy()
        # A_t^H y_t for every frame
        self.data_images = np.stack([decode_frame(y.data[t], coils, masks.lines[t]) for t in range(n)])

    def gram(self, v: np.ndarray, frames=None) -> np.ndarray:
        """Apply ``A_t^H A_t`` to ``v[j]`` for frame ``frames[j]``; ``v`` is ``(B, H, W)``."""
        idx = np.arange(self.n_frames) if frames is None else np.asarray(frames)
        h, w = self.shape
        q = self.coils.shape[0]
        out = np.empty((len(idx), h, w), dtype=np.complex128)
        for j, t in enumerate(idx):
            cv = (self._coils_t * v[j][:, None, :]).reshape(h, q * w)
            z = (self.basis_h[t] @ (self.basis[t] @ cv)).reshape(h, q, w)
            z *= self._coils_t_conj
            out[j] = z.sum(axis=1)
        return out


class McFrameSystem:
    """Normal operator and right-hand side of one source frame."""

    def __init__(self, enc: EncodingSystem, u_rows: np.ndarray, x_prev: Optional[np.ndarray], lam: Optional[float],
                 frames=None):
        self.enc = enc
        self.frames = np.arange(enc.n_frames) if frames is None else np.asarray(frames)
        self.warp = BilinearWarp(u_rows)
        self.shift = 0.0 if lam is None else 1.0 / (2.0 * lam)
        rhs = self.warp.adjoint_sum(enc.data_images[self.frames])
        if lam is not None:
            rhs = rhs + self.shift * x_prev
        self.rhs = rhs

    def __call__(self, x: np.ndarray) -> np.ndarray:
        v = self.warp.apply_shared(x)
        out = self.warp.adjoint_sum(self.enc.gram(v, self.frames))
        if self.shift:
            out = out + self.shift * x
        return out

    def objective(self, x: np.ndarray, y: KSpaceSet, coils: CoilMaps, masks: SamplingMaskSet,
                  x_prev: Optional[np.ndarray]) -> float:
        """Frame-wise value of the motion-compensated least-squares objective."""
        from .operators import encode_frame

        v = self.warp.apply(x)
        total = 0.0
        for j, t2 in enumerate(self.frames):
            res = encode_frame(v[j], coils, masks.lines[t2]) - y.data[t2]
            total += float(np.sum(np.abs(res) ** 2))
        if self.shift:
            total += self.shift * float(np.sum(np.abs(x - x_prev) ** 2))
        return total


def solve_mc_frame(
    t1: int,
    y: KSpaceSet,
    coils: CoilMaps,
    masks: SamplingMaskSet,
    motion: MotionFieldSet,
    x_prev_t1: np.ndarray,
    cfg: ReconConfig,
    enc: Optional[EncodingSystem] = None,
    track_objective: bool = False,
) -> tuple[np.ndarray, CgReport]:
    """Motion-compensated CG-SENSE for source frame ``t1``, warm-started at ``x_prev_t1``."""
    enc = enc or EncodingSystem(y, coils, masks)
    if motion.n_frames != enc.n_frames or motion.shape != enc.shape:
        raise ValueError("motion set does not match the data dimensions")
    system = McFrameSystem(enc, motion.fields[t1], np.asarray(x_prev_t1), cfg.lam)
    if not np.all(np.isfinite(system.rhs)):
        raise FloatingPointError("non-finite right-hand side")
    return cg(system, system.rhs, x0=x_prev_t1, tol=cfg.cg_tol, max_iters=cfg.cg_max_iters,
              track_objective=track_objective)


def solve_plain_frame(
    t: int,
    y: KSpaceSet,
    coils: CoilMaps,
    masks: SamplingMaskSet,
    n_iters: int,
    enc: Optional[EncodingSystem] = None,
) -> tuple[np.ndarray, CgReport]:
    """CG-SENSE of frame ``t`` alone, from zero, for ``n_iters`` iterations."""
    enc = enc or EncodingSystem(y, coils, masks)
    h, w = enc.shape

    def normal(x):
        return enc.gram(x[None], [t])[0]

    return cg(normal, enc.data_images[t], x0=np.zeros((h, w), np.complex128), tol=PLAIN_TOL, max_iters=n_iters)


def _map_frames(fn, n: int, threads: int):
    if threads <= 1:
        return [fn(t) for t in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def plain_block(y, coils, masks, n_iters: int, threads: int = 1, enc=None):
    """Motion-free first block: per-frame CG-SENSE without prior."""
    enc = enc or EncodingSystem(y, coils, masks)
    res = _map_frames(lambda t: solve_plain_frame(t, y, coils, masks, n_iters, enc), enc.n_frames, threads)
    return ImageSequence(np.stack([r[0] for r in res])), [r[1] for r in res]


def mc_block(y, coils, masks, motion: MotionFieldSet, x_prev: ImageSequence, cfg: ReconConfig, enc=None):
    """One motion-compensated block over all frames."""
    enc = enc or EncodingSystem(y, coils, masks)
    res = _map_frames(
        lambda t: solve_mc_frame(t, y, coils, masks, motion, x_prev.frames[t], cfg, enc),
        enc.n_frames,
        cfg.threads,
    )
    return ImageSequence(np.stack([r[0] for r in res])), [r[1] for r in res]
