"""Alternating motion estimation and motion-compensated CG-SENSE.

Iteration 1 is the motion-free SENSE block started from zero. Every later
iteration ``i`` estimates motion on ``x_{i-1}`` and then solves the
motion-compensated problem with ``x_{i-1}`` as the quadratic prior.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cg import CgReport, EncodingSystem, mc_block, plain_block
from .data import CoilMaps, ImageSequence, KSpaceSet, MotionConfig, MotionFieldSet, ReconConfig, SamplingMaskSet
from .metrics import psnr
from .motion import MotionEnergyBreakdown, MotionEstimator, VariationalEstimator, motion_energy, run_estimator
from .operators import BilinearWarp, decode_frame, fft_workers

log = logging.getLogger(__name__)


@dataclass
class IterationRecord:
    iteration: int
    eq1_data_fidelity: float
    motion_energy: Optional[MotionEnergyBreakdown]
    psnr_vs_reference: Optional[float]
    cg_reports: list
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "eq1_data_fidelity": self.eq1_data_fidelity,
            "motion_energy": None if self.motion_energy is None else self.motion_energy.to_dict(),
            "psnr_vs_reference": self.psnr_vs_reference,
            "cg_reports": [r.to_dict() for r in self.cg_reports],
            "wall_time": self.wall_time,
        }


@dataclass
class UnrollHistory:
    records: list = field(default_factory=list)
    stopped_early: bool = False
    breakdown: bool = False
    motion_history: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def psnr(self) -> list:
        return [r.psnr_vs_reference for r in self.records]

    def to_dict(self) -> dict:
        return {
            "n_iterations": len(self.records),
            "stopped_early": self.stopped_early,
            "breakdown": self.breakdown,
            "iterations": [r.to_dict() for r in self.records],
        }


def zero_filled(y: KSpaceSet, coils: CoilMaps, masks: SamplingMaskSet) -> ImageSequence:
    """Adjoint reconstruction ``A_t^H y_t`` of every frame."""
    n, q, h, w = y.data.shape
    if coils.data.shape != (q, h, w) or masks.n_frames != n or masks.shape != (h, w):
        raise ValueError("k-space, coil maps and masks have inconsistent dimensions")
    return ImageSequence(np.stack([decode_frame(y.data[t], coils, masks.lines[t]) for t in range(n)]))


def eq1_objective(x: ImageSequence, u: MotionFieldSet, y: KSpaceSet, coils: CoilMaps,
                  masks: SamplingMaskSet) -> float:
    """``sum_{t1,t2} ||A_t2 U[t1->t2] x_t1 - y_t2||^2``."""
    n, q, h, w = y.data.shape
    if x.frames.shape != (n, h, w) or u.fields.shape != (n, n, 2, h, w):
        raise ValueError("images, motion and k-space have inconsistent dimensions")
    if coils.data.shape != (q, h, w) or masks.n_frames != n:
        raise ValueError("coil maps or masks do not match the k-space")
    rows = masks.row_masks()
    total = 0.0
    for t1 in range(n):
        v = BilinearWarp(u.fields[t1]).apply(x.frames[t1])
        for t2 in range(n):
            k = _fft_rows(coils.data * v[t2], rows[t2])
            res = k - y.data[t2][:, rows[t2], :]
            total += float(np.sum(res.real**2 + res.imag**2))
        # unsampled rows of y are zero by the container invariant
    return total


def _fft_rows(img: np.ndarray, row_sel: np.ndarray) -> np.ndarray:
    from .operators import fft2c

    return fft2c(img)[:, row_sel, :]


def _psnr_or_none(x: ImageSequence, reference: Optional[ImageSequence]) -> Optional[float]:
    return None if reference is None else psnr(x, reference).mean


def _run(y, coils, masks, recon_cfg: ReconConfig, motion_cfg: MotionConfig, next_motion,
         reference: Optional[ImageSequence], use_stop_rule: bool = True):
    n, _, h, w = y.data.shape
    history = UnrollHistory()
    with fft_workers(recon_cfg.threads):
        enc = EncodingSystem(y, coils, masks)
        t0 = time.perf_counter()
        x, reports = plain_block(y, coils, masks, recon_cfg.first_block_cg_iters, recon_cfg.threads, enc)
        u = MotionFieldSet.zeros(n, h, w)
        history.records.append(
            IterationRecord(1, eq1_objective(x, u, y, coils, masks), None, _psnr_or_none(x, reference),
                            reports, time.perf_counter() - t0)
        )
        log.info("iteration 1 (motion-free): psnr=%s", history.records[-1].psnr_vs_reference)
        for i in range(2, recon_cfg.unroll_iters + 1):
            t0 = time.perf_counter()
            u = next_motion(x)
            energy = motion_energy(u, np.abs(x.frames), motion_cfg)
            if recon_cfg.keep_motion_history:
                history.motion_history.append(u)
            x, reports = mc_block(y, coils, masks, u, x, recon_cfg, enc)
            rec = IterationRecord(i, eq1_objective(x, u, y, coils, masks), energy, _psnr_or_none(x, reference),
                                  reports, time.perf_counter() - t0)
            history.records.append(rec)
            if any(r.breakdown for r in reports):
                history.breakdown = True
            log.info("iteration %d: psnr=%s motion energy=%.4g", i, rec.psnr_vs_reference, energy.total)
            prev = history.records[-2].psnr_vs_reference
            if use_stop_rule and reference is not None and rec.psnr_vs_reference - prev < recon_cfg.psnr_stop_delta:
                history.stopped_early = i < recon_cfg.unroll_iters
                break
    return x, u, history


def reconstruct(
    y: KSpaceSet,
    coils: CoilMaps,
    masks: SamplingMaskSet,
    recon_cfg: ReconConfig = ReconConfig(),
    motion_cfg: MotionConfig = MotionConfig(),
    estimator: Optional[MotionEstimator] = None,
    reference: Optional[ImageSequence] = None,
) -> tuple[ImageSequence, MotionFieldSet, UnrollHistory]:
    """Unrolled joint reconstruction; returns the final images, last motion set and history.

    With a reference, iterations stop once the PSNR gain of an iteration
    falls below ``recon_cfg.psnr_stop_delta``; otherwise exactly
    ``recon_cfg.unroll_iters`` iterations run.
    """
    estimator = estimator or VariationalEstimator()
    return _run(y, coils, masks, recon_cfg, motion_cfg,
                lambda x: run_estimator(estimator, x, motion_cfg), reference)


def precomputed_motion_reconstruct(
    y: KSpaceSet,
    coils: CoilMaps,
    masks: SamplingMaskSet,
    fixed_u: MotionFieldSet,
    recon_cfg: ReconConfig = ReconConfig(),
    reference: Optional[ImageSequence] = None,
    return_history: bool = False,
):
    """Same block schedule as :func:`reconstruct` with one motion set held fixed."""
    n, _, h, w = y.data.shape
    if fixed_u.fields.shape != (n, n, 2, h, w):
        raise ValueError(f"motion shape {fixed_u.fields.shape} does not match the data")
    x, _, history = _run(y, coils, masks, recon_cfg, MotionConfig(), lambda x: fixed_u, reference,
                         use_stop_rule=False)
    return (x, history) if return_history else x


def fixed_motion_reconstruct(
    y: KSpaceSet,
    coils: CoilMaps,
    masks: SamplingMaskSet,
    recon_cfg: ReconConfig = ReconConfig(),
    motion_cfg: MotionConfig = MotionConfig(),
    estimator: Optional[MotionEstimator] = None,
    reference: Optional[ImageSequence] = None,
) -> tuple[ImageSequence, MotionFieldSet, UnrollHistory]:
    """Baseline: motion estimated once on the zero-filled images ``x_0`` and held fixed.

    The block schedule is that of :func:`reconstruct` without the stopping rule.
    """
    estimator = estimator or VariationalEstimator()
    u = run_estimator(estimator, zero_filled(y, coils, masks), motion_cfg)
    x, hist = precomputed_motion_reconstruct(y, coils, masks, u, recon_cfg, reference, return_history=True)
    return x, u, hist


def motion_free_reconstruct(y: KSpaceSet, coils: CoilMaps, masks: SamplingMaskSet,
                            recon_cfg: ReconConfig = ReconConfig()) -> tuple[ImageSequence, list]:
    """Per-frame CG-SENSE without motion, i.e. the first block alone."""
    with fft_workers(recon_cfg.threads):
        return plain_block(y, coils, masks, recon_cfg.first_block_cg_iters, recon_cfg.threads)


__all__ = [
    "CgReport",
    "IterationRecord",
    "UnrollHistory",
    "eq1_objective",
    "fixed_motion_reconstruct",
    "motion_free_reconstruct",
    "precomputed_motion_reconstruct",
    "reconstruct",
    "zero_filled",
]
