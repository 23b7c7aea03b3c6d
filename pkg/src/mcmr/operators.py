"""Linear operators of the encoding chain and of the motion model.

The Fourier transform is centred (DC at ``(H//2, W//2)``) and orthonormal.
Rows are the phase-encode (ky) axis, columns the readout (kx) axis.
Warping is backward bilinear sampling with zero padding outside the grid;
its adjoint is bilinear splatting with the same weights.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft
from scipy import sparse

from .data import CoilMaps

_WORKERS = 1


@contextlib.contextmanager
def fft_workers(n: int):
    """Temporarily set the number of FFT worker threads."""
    global _WORKERS
    old, _WORKERS = _WORKERS, int(n)
    try:
        yield
    finally:
        _WORKERS = old


def fftc(x: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    x = sfft.ifftshift(x, axes=axes)
    x = sfft.fftn(x, axes=axes, norm="ortho", workers=_WORKERS)
    return sfft.fftshift(x, axes=axes)


def ifftc(x: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    x = sfft.ifftshift(x, axes=axes)
    x = sfft.ifftn(x, axes=axes, norm="ortho", workers=_WORKERS)
    return sfft.fftshift(x, axes=axes)


def fft2c(img: np.ndarray) -> np.ndarray:
    """Centred orthonormal 2D DFT over the last two axes."""
    return fftc(np.asarray(img, dtype=np.complex128), (-2, -1))


def ifft2c(ksp: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    return ifftc(np.asarray(ksp, dtype=np.complex128), (-2, -1))


def _coil_array(coils) -> np.ndarray:
    return coils.data if isinstance(coils, CoilMaps) else np.asarray(coils, dtype=np.complex128)


def row_mask(mask_lines, height: int) -> np.ndarray:
    """Boolean ky-row mask from either row indices or a boolean array."""
    m = np.asarray(mask_lines)
    if m.dtype == bool:
        if m.shape != (height,):
            raise ValueError(f"row mask has shape {m.shape}, expected ({height},)")
        return m
    out = np.zeros(height, dtype=bool)
    if m.size:
        if m.min() < 0 or m.max() >= height:
            raise ValueError(f"mask line index outside [0, {height})")
        out[m.astype(np.int64)] = True
    return out


def encode_frame(x: np.ndarray, coils, mask_lines) -> np.ndarray:
    """Multi-coil k-space of one frame: ``D F (c_q x)`` for every coil, ``(Q, H, W)``."""
    c = _coil_array(coils)
    x = np.asarray(x)
    if x.shape != c.shape[1:]:
        raise ValueError(f"image shape {x.shape} does not match coil maps {c.shape[1:]}")
    m = row_mask(mask_lines, x.shape[0])
    k = fft2c(c * x)
    k[:, ~m, :] = 0
    return k


def decode_frame(k: np.ndarray, coils, mask_lines) -> np.ndarray:
    """Adjoint of :func:`encode_frame`: ``sum_q conj(c_q) F^H (D k_q)``."""
    c = _coil_array(coils)
    k = np.asarray(k)
    if k.shape != c.shape:
        raise ValueError(f"k-space shape {k.shape} does not match coil maps {c.shape}")
    m = row_mask(mask_lines, k.shape[1])
    k = np.where(m[None, :, None], k, 0)
    return np.sum(np.conj(c) * ifft2c(k), axis=0)


class BilinearWarp:
    """Backward bilinear warp for a fixed displacement field.

    ``u`` has shape ``(..., 2, H, W)``; leading dimensions form a batch of
    independent fields. The interpolation stencil is computed once so that
    repeated forward/adjoint applications inside an iterative solver only
    pay for the gather and the scatter.
    """

    def __init__(self, u: np.ndarray):
        u = np.asarray(u, dtype=np.float64)
        if u.ndim < 3 or u.shape[-3] != 2:
            raise ValueError(f"displacement must have shape (..., 2, H, W), got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("displacement field contains non-finite values")
        self.batch_shape = u.shape[:-3]
        h, w = u.shape[-2:]
        self.shape = (h, w)
        u = u.reshape(-1, 2, h, w)
        nb = u.shape[0]
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        sy = yy + u[:, 0]
        sx = xx + u[:, 1]
        y0 = np.floor(sy)
        x0 = np.floor(sx)
        fy = sy - y0
        fx = sx - x0
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)

        idx = np.empty((4, nb, h * w), dtype=np.int64)
        wts = np.empty((4, nb, h * w), dtype=np.float64)
        base = (np.arange(nb, dtype=np.int64) * (h * w))[:, None]
        corners = ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx))
        for j, (dy, dx, wt) in enumerate(corners):
            yi = y0 + dy
            xi = x0 + dx
            inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            flat = np.where(inside, yi * w + xi, 0).reshape(nb, -1)
            idx[j] = flat + base
            wts[j] = np.where(inside, wt, 0.0).reshape(nb, -1)
        self._idx = idx
        self._wts = wts
        self._n = nb * h * w
        self._shared = None

    def _shared_matrix(self):
        # sparse (batch*H*W, H*W) operator for a single source image shared by the batch
        if self._shared is None:
            hw = self.shape[0] * self.shape[1]
            rows = np.broadcast_to(np.arange(self._n).reshape(self._idx.shape[1:]), self._idx.shape).reshape(-1)
            m = sparse.csr_matrix(
                (self._wts.reshape(-1).astype(np.complex128), (rows, (self._idx % hw).reshape(-1))),
                shape=(self._n, hw),
            )
            self._shared = (m, m.T.tocsr())
        return self._shared

    def apply_shared(self, x: np.ndarray) -> np.ndarray:
        """Warp one ``(H, W)`` image with every field of the batch."""
        m, _ = self._shared_matrix()
        return (m @ np.asarray(x).reshape(-1)).reshape(self.batch_shape + self.shape)

    def adjoint_sum(self, r: np.ndarray) -> np.ndarray:
        """``sum_b adjoint(r)[b]``: the adjoint of :meth:`apply_shared`."""
        _, mt = self._shared_matrix()
        return (mt @ np.asarray(r).reshape(-1)).reshape(self.shape)

    def _flat(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        h, w = self.shape
        full = self.batch_shape + (h, w)
        if x.shape != full:
            x = np.broadcast_to(x, full)
        return x.reshape(-1)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Sample ``x`` at ``p + u(p)``; ``x`` broadcasts against the batch."""
        xf = self._flat(x)
        out = xf[self._idx[0]] * self._wts[0]
        for j in range(1, 4):
            out += xf[self._idx[j]] * self._wts[j]
        return out.reshape(self.batch_shape + self.shape)

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        """Splat ``r`` back onto the source grid with the forward weights."""
        r = np.asarray(r)
        rr = r.reshape((1,) + self._wts.shape[1:])
        idx = self._idx.reshape(-1)
        out = np.bincount(idx, weights=(self._wts * rr.real).reshape(-1), minlength=self._n)
        if np.iscomplexobj(r):
            imag = np.bincount(idx, weights=(self._wts * rr.imag).reshape(-1), minlength=self._n)
            out = out + 1j * imag
        return out.reshape(self.batch_shape + self.shape)


def warp_apply(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Backward-warp image ``x`` with displacement ``u`` of shape ``(2, H, W)``."""
    x = np.asarray(x)
    if x.shape[-2:] != np.shape(u)[-2:]:
        raise ValueError(f"image {x.shape} and displacement {np.shape(u)} grids differ")
    return BilinearWarp(u).apply(x)


def warp_adjoint(r: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`warp_apply` for the same ``u``."""
    r = np.asarray(r)
    if r.shape[-2:] != np.shape(u)[-2:]:
        raise ValueError(f"image {r.shape} and displacement {np.shape(u)} grids differ")
    return BilinearWarp(u).adjoint(r)


@dataclass(frozen=True)
class LinearOperator:
    in_shape: tuple
    out_shape: tuple
    apply: Callable[[np.ndarray], np.ndarray]
    apply_adjoint: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x):
        return self.apply(x)

    @property
    def H(self) -> "LinearOperator":
        return LinearOperator(self.out_shape, self.in_shape, self.apply_adjoint, self.apply)


def fft_operator(shape) -> LinearOperator:
    return LinearOperator(tuple(shape), tuple(shape), fft2c, ifft2c)


def encode_operator(coils, mask_lines) -> LinearOperator:
    c = _coil_array(coils)
    return LinearOperator(
        c.shape[1:],
        c.shape,
        lambda x: encode_frame(x, c, mask_lines),
        lambda k: decode_frame(k, c, mask_lines),
    )


def warp_operator(u: np.ndarray) -> LinearOperator:
    w = BilinearWarp(u)
    return LinearOperator(w.shape, w.shape, w.apply, w.adjoint)


def _crandn(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def adjoint_dot_test(op: LinearOperator, trials: int = 5, seed: int = 0) -> float:
    """Largest relative mismatch of ``<A x, y>`` against ``<x, A^H y>``.

    The mismatch is normalised by ``||A x|| * ||y||``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = _crandn(rng, op.in_shape)
        y = _crandn(rng, op.out_shape)
        ax = op.apply(x)
        lhs = np.vdot(y, ax)
        rhs = np.vdot(op.apply_adjoint(y), x)
        scale = np.linalg.norm(ax) * np.linalg.norm(y)
        if scale == 0:
            continue
        worst = max(worst, float(abs(lhs - rhs) / scale))
    return worst
