"""Padded 2D convolution, its adjoints, and filter-bank utilities.

Alignment convention
--------------------
For a filter of shape ``(rh, rw)`` the "same"-size convolution is

    y[n1, n2] = sum_{i, j} d[i, j] * x[n1 + ch - i, n2 + cw - j]

with centre offsets ``ch = (rh - 1) // 2`` and ``cw = (rw - 1) // 2``. Out of
range indices of ``x`` are resolved by the boundary condition. Odd filters are
therefore centred; even filters lean towards the top-left, e.g. the 2-tap
filter ``[1, -1]`` computes ``x[n] - x[n - 1]``.

The padded image used throughout has ``rh - 1 - ch`` rows before and ``ch``
rows after (same for columns), so that tap ``(i, j)`` reads the window of the
padded image starting at ``(rh - 1 - i, rw - 1 - j)``.

Filters are vectorized row-major: tap ``r = i * rw + j``, and a filter bank is
the ``R x K`` matrix whose columns are the vectorized filters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (DimensionError, InputError, InvalidPaddingError,
                     InvalidParameterError, UndefinedRatioError)

CIRCULAR = "circular"
SYMMETRIC = "symmetric"
BOUNDARY_CONDITIONS = (CIRCULAR, SYMMETRIC)

_NUMPY_MODE = {CIRCULAR: "wrap", SYMMETRIC: "symmetric"}


def check_bc(bc: str) -> str:
    if bc not in BOUNDARY_CONDITIONS:
        raise InvalidParameterError(f"unknown boundary condition {bc!r}; expected one of "
                         f"{BOUNDARY_CONDITIONS}")
    return bc


def as_image(x) -> np.ndarray:
    """Return `x` as a finite 2D float array (1D input becomes one row)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.size == 0:
        raise DimensionError(f"expected a non-empty 2D image, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("image contains non-finite entries")
    return x


def as_filter(d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.ndim == 1:
        d = d[None, :]
    if d.ndim != 2 or d.size == 0:
        raise DimensionError(f"expected a non-empty 2D filter, got shape {d.shape}")
    return d


@dataclass
class FilterBank:
    """K filters of a common shape, stored as the R x K matrix ``D``."""

    D: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        self.D = np.asarray(self.D, dtype=float)
        self.shape = (int(self.shape[0]), int(self.shape[1]))
        if self.D.ndim != 2 or self.D.shape[0] != self.shape[0] * self.shape[1]:
            raise DimensionError(
                f"filter matrix of shape {self.D.shape} does not match filter "
                f"shape {self.shape}")

    @classmethod
    def from_filters(cls, filters: Sequence[np.ndarray]) -> "FilterBank":
        filters = [as_filter(f) for f in filters]
        shape = filters[0].shape
        if any(f.shape != shape for f in filters):
            raise DimensionError("all filters must share one shape")
        return cls(np.stack([f.ravel() for f in filters], axis=1), shape)

    @property
    def R(self) -> int:
        return self.D.shape[0]

    @property
    def K(self) -> int:
        return self.D.shape[1]

    @property
    def filters(self) -> np.ndarray:
        """The filters as a ``(K, rh, rw)`` array."""
        return self.D.T.reshape(self.K, *self.shape)

    def filter(self, k: int) -> np.ndarray:
        return self.D[:, k].reshape(self.shape)

    def copy(self) -> "FilterBank":
        return FilterBank(self.D.copy(), self.shape)


def pad_widths(shape: tuple[int, int]) -> tuple[tuple[int, int], tuple[int, int]]:
    """(before, after) padding per axis for a filter of the given shape."""
    rh, rw = shape
    ch, cw = (rh - 1) // 2, (rw - 1) // 2
    return (rh - 1 - ch, ch), (rw - 1 - cw, cw)


def _pad(x: np.ndarray, widths, bc: str) -> np.ndarray:
    check_bc(bc)
    if bc == SYMMETRIC:
        (bh, ah), (bw, aw) = widths
        if max(bh, ah) >= x.shape[0] and max(bh, ah) > 0 or \
                max(bw, aw) >= x.shape[1] and max(bw, aw) > 0:
            raise InvalidPaddingError(
                f"symmetric padding {widths} needs widths smaller than the "
                f"image size {x.shape}")
    return np.pad(x, widths, mode=_NUMPY_MODE[bc])


def pad(x, dh: int, dw: int, bc: str = CIRCULAR) -> np.ndarray:
    """Pad `dh` rows above and below and `dw` columns left and right.

    Circular padding wraps around; symmetric padding mirrors with the edge
    sample repeated (``[1, 2, 3] -> [1, 1, 2, 3, 3]``).
    """
    if dh < 0 or dw < 0:
        raise InvalidPaddingError("padding widths must be nonnegative")
    x = as_image(x)
    return _pad(x, ((dh, dh), (dw, dw)), bc)


def pad_for_filter(x, shape: tuple[int, int], bc: str = CIRCULAR) -> np.ndarray:
    """Pad `x` for "same" convolution with filters of `shape`."""
    return _pad(as_image(x), pad_widths(shape), bc)


def _check_fits(x_shape, f_shape):
    if f_shape[0] > x_shape[0] or f_shape[1] > x_shape[1]:
        raise DimensionError(f"filter {f_shape} is larger than image {x_shape}")


def tap_windows(xhat: np.ndarray, shape: tuple[int, int]) -> Iterator[np.ndarray]:
    """Yield, tap by tap in row-major order, the window of `xhat` it reads."""
    rh, rw = shape
    H, W = xhat.shape[0] - rh + 1, xhat.shape[1] - rw + 1
    for i in range(rh):
        for j in range(rw):
            oi, oj = rh - 1 - i, rw - 1 - j
            yield xhat[oi:oi + H, oj:oj + W]


def conv_same(d, x, bc: str = CIRCULAR) -> np.ndarray:
    """Same-size 2D convolution of image `x` with filter `d`."""
    d, x = as_filter(d), as_image(x)
    _check_fits(x.shape, d.shape)
    xhat = pad_for_filter(x, d.shape, bc)
    out = np.zeros_like(x)
    for tap, window in zip(d.ravel(), tap_windows(xhat, d.shape)):
        if tap != 0.0:
            out += tap * window
    return out


def psi_adjoint(xhat, z, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of ``d -> conv_same(d, x)`` applied to `z`.

    `xhat` is the image already padded for `shape`. Tap ``r`` receives the
    inner product of `z` with the window tap ``r`` reads, so that
    ``<conv_same(d, x), z> == <d, psi_adjoint(xhat, z, d.shape)>``.
    """
    xhat = np.asarray(xhat, dtype=float)
    z = as_image(z)
    rh, rw = shape
    if xhat.shape != (z.shape[0] + rh - 1, z.shape[1] + rw - 1):
        raise DimensionError(
            f"padded image {xhat.shape} does not match code {z.shape} and "
            f"filter shape {shape}")
    taps = [np.vdot(window, z) for window in tap_windows(xhat, shape)]
    return np.array(taps).reshape(shape)


def _source_index(image_shape, widths, bc) -> np.ndarray:
    """For every padded pixel, the flat index of the image pixel it copies."""
    idx = np.arange(image_shape[0] * image_shape[1]).reshape(image_shape)
    return _pad(idx, widths, bc)


def unpad_adjoint(zhat: np.ndarray, image_shape, widths, bc: str) -> np.ndarray:
    """Adjoint of padding: fold padded values back onto the pixels they copy."""
    src = _source_index(image_shape, widths, bc)
    n = image_shape[0] * image_shape[1]
    return np.bincount(src.ravel(), weights=zhat.ravel(), minlength=n).reshape(image_shape)


def conv_adjoint(d, z, bc: str = CIRCULAR) -> np.ndarray:
    """Adjoint of ``x -> conv_same(d, x, bc)`` applied to `z`.

    Under circular boundaries with odd filter sizes this coincides with
    ``conv_same(flip(d), z)``; in general (even sizes, symmetric boundaries)
    the boundary folding differs and only this routine is the exact adjoint.
    """
    d, z = as_filter(d), as_image(z)
    _check_fits(z.shape, d.shape)
    widths = pad_widths(d.shape)
    rh, rw = d.shape
    zhat = np.zeros((z.shape[0] + rh - 1, z.shape[1] + rw - 1))
    for tap, window in zip(d.ravel(), tap_windows(zhat, d.shape)):
        if tap != 0.0:
            window += tap * z
    return unpad_adjoint(zhat, z.shape, widths, bc)


def flip(d) -> np.ndarray:
    """Rotate a filter by 180 degrees."""
    return as_filter(d)[::-1, ::-1].copy()


def tf_residual(bank: FilterBank, x, bc: str = CIRCULAR) -> float:
    """Relative energy mismatch ``|sum_k ||d_k * x||^2 - ||x||^2| / ||x||^2``."""
    x = as_image(x)
    energy = float(np.vdot(x, x))
    if energy == 0.0:
        raise UndefinedRatioError("tight-frame residual is undefined for x = 0")
    total = sum(float(np.sum(conv_same(f, x, bc) ** 2)) for f in bank.filters)
    return abs(total - energy) / energy


def orthogonality_residual(D) -> float:
    """Frobenius distance ``||D D^T - I / R||_F``."""
    D = D.D if isinstance(D, FilterBank) else np.asarray(D, dtype=float)
    R = D.shape[0]
    return float(np.linalg.norm(D @ D.T - np.eye(R) / R))


class PatchOperator:
    """The stacked sliding-window matrices of a set of same-size images.

    For image ``l`` the matrix ``P[l]`` (N x R) satisfies
    ``P[l] @ d == conv_same(d, x_l).ravel()``. Keeping all ``L`` matrices in
    memory trades ``L * N * R`` floats for dense matrix products in the
    training loops; the tap-loop routines above stay memory-light.
    """

    def __init__(self, images, shape: tuple[int, int], bc: str = CIRCULAR):
        images = [as_image(x) for x in images]
        if not images:
            raise InputError("need at least one image")
        self.image_shape = images[0].shape
        if any(x.shape != self.image_shape for x in images):
            raise DimensionError("all images must share one size")
        _check_fits(self.image_shape, shape)
        self.shape = (int(shape[0]), int(shape[1]))
        self.bc = check_bc(bc)
        rh, rw = self.shape
        N = self.image_shape[0] * self.image_shape[1]
        mats = []
        for x in images:
            xhat = pad_for_filter(x, self.shape, bc)
            win = sliding_window_view(xhat, self.shape)[:, :, ::-1, ::-1]
            mats.append(win.reshape(N, rh * rw))
        self.P = np.stack(mats)

    @property
    def L(self) -> int:
        return self.P.shape[0]

    @property
    def N(self) -> int:
        return self.P.shape[1]

    @property
    def R(self) -> int:
        return self.P.shape[2]

    def apply(self, D: np.ndarray) -> np.ndarray:
        """Filter responses, shape ``(L, N, K)`` for an ``R x K`` matrix."""
        return self.P @ D

    def adjoint(self, Z: np.ndarray) -> np.ndarray:
        """``sum_l P[l]^T Z[l]`` for responses of shape ``(L, N, K)``."""
        return np.einsum("lnr,lnk->rk", self.P, Z)

    def gram(self) -> np.ndarray:
        return np.einsum("lnr,lns->rs", self.P, self.P)
