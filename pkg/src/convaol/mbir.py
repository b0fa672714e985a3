"""Model-based image reconstruction with a learned convolutional regularizer.

Solves

    min_{x >= 0} 1/2 ||y - A x||_W^2
                 + gamma * min_Z sum_k 1/2 ||d_k * x - z_k||^2 + alpha' sum_n psi_n [z_kn != 0]

by two-block reBPEG-M: exact thresholding for the codes, then a diagonally
majorized step for the image. When the filters form a tight frame the image
step is a per-pixel weighted average of the data-fit point and the output of
the convolutional autoencoder, clamped at zero.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import lsqr

from . import bpegm
from .caol import hard_threshold
from .convops import (CIRCULAR, FilterBank, as_image, conv_adjoint, conv_same,
                      orthogonality_residual)
from .errors import DimensionError, InputError, InvalidParameterError
from .majorizers import DIAGONAL, Majorizer, diag_weighted_normal


class ForwardModel:
    """A sparse system matrix acting on images of a fixed shape.

    Parameters
    ----------
    A : scipy.sparse matrix, shape (m, n)
    image_shape : tuple
        ``(H, W)`` with ``H * W == n``.
    meas_shape : tuple, optional
        Shape used to present measurements as an image (e.g. views x bins).
    """

    def __init__(self, A, image_shape, meas_shape=None, name: str = "matrix"):
        self.A = sp.csr_matrix(A, dtype=float)
        self.image_shape = (int(image_shape[0]), int(image_shape[1]))
        if self.A.shape[1] != self.image_shape[0] * self.image_shape[1]:
            raise DimensionError("matrix columns do not match the image size")
        self.meas_shape = meas_shape or (self.A.shape[0], 1)
        self.name = name
        self._absA = abs(self.A)
        self._sqA = self.A.multiply(self.A).tocsr()

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    def apply(self, x) -> np.ndarray:
        return self.A @ np.ravel(x)

    def adjoint(self, r) -> np.ndarray:
        return (self.A.T @ np.ravel(r)).reshape(self.image_shape)

    def abs_apply(self, x) -> np.ndarray:
        return self._absA @ np.ravel(x)

    def abs_adjoint(self, r) -> np.ndarray:
        return self._absA.T @ np.ravel(r)

    def sq_adjoint(self, r) -> np.ndarray:
        """``(A o A)^T r`` with ``o`` the entrywise product."""
        return self._sqA.T @ np.ravel(r)

    def as_measurement_image(self, r) -> np.ndarray:
        return np.reshape(r, self.meas_shape)


def identity_model(shape) -> ForwardModel:
    n = int(shape[0]) * int(shape[1])
    return ForwardModel(sp.identity(n, format="csr"), shape, tuple(shape), "identity")


def mask_model(mask) -> ForwardModel:
    """Inpainting: observe the pixels where `mask` is true."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise DimensionError("mask must be 2D")
    idx = np.flatnonzero(mask)
    A = sp.csr_matrix((np.ones(idx.size), (np.arange(idx.size), idx)),
                      shape=(idx.size, mask.size))
    return ForwardModel(A, mask.shape, (idx.size, 1), "mask")


def detector_count(n: int) -> int:
    """Bins covering the image diagonal, with parity matching `n`."""
    return n + 2 * math.ceil((math.sqrt(2.0) - 1.0) * n / 2.0)


def radon_small(angles, n: int, n_det: int | None = None) -> ForwardModel:
    """Parallel-beam ray sums on an ``n x n`` grid by pixel-driven interpolation.

    Every pixel centre is projected onto the detector axis at each angle and
    its unit mass is split linearly between the two nearest bins. Bins have
    unit spacing and are centred on the rotation axis.

    Parameters
    ----------
    angles : sequence of float
        Projection angles in radians.
    n : int
        Image side, at most 256.
    """
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    if angles.size == 0:
        raise InputError("radon_small needs at least one angle")
    if not 1 <= n <= 256:
        raise InputError("radon_small supports 1 <= n <= 256")
    n_det = detector_count(n) if n_det is None else int(n_det)
    c = (n - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    xc = (jj - c).ravel()
    yc = (c - ii).ravel()
    pix = np.arange(n * n)
    rows, cols, vals = [], [], []
    for a, th in enumerate(angles):
        u = xc * math.cos(th) + yc * math.sin(th) + (n_det - 1) / 2.0
        lo = np.floor(u).astype(int)
        w = u - lo
        for off, wt in ((0, 1.0 - w), (1, w)):
            b = lo + off
            keep = (b >= 0) & (b < n_det) & (wt > 0)
            rows.append(a * n_det + b[keep])
            cols.append(pix[keep])
            vals.append(wt[keep])
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(angles.size * n_det, n * n))
    return ForwardModel(A, (n, n), (angles.size, n_det), "radon")


def view_angles(n_views: int, fraction: float = 1.0) -> np.ndarray:
    """Every ``1/fraction``-th of `n_views` equally spaced angles on [0, pi)."""
    full = np.arange(n_views) * math.pi / n_views
    step = max(1, int(round(1.0 / fraction)))
    return full[::step]


def poisson_gaussian_weights(rho, sigma2: float) -> np.ndarray:
    """Statistical weights ``rho^2 / (rho + sigma^2)`` for pre-log counts."""
    rho = np.maximum(np.asarray(rho, dtype=float), 0.0)
    return rho * rho / (rho + sigma2)


def simulate_transmission(model: ForwardModel, x, I0: float = 1e5,
                          sigma2: float = 25.0, rng=None):
    """Simulate post-log data ``y`` and weights from ``I0 exp(-A x)`` counts.

    Returns ``(y, W)``; counts receive Poisson noise plus Gaussian readout
    noise of variance `sigma2`, and are floored at 1 before the log.
    """
    rng = np.random.default_rng(rng)
    mean = I0 * np.exp(-model.apply(x))
    rho = rng.poisson(mean) + math.sqrt(sigma2) * rng.standard_normal(mean.shape)
    rho = np.maximum(rho, 1.0)
    return np.log(I0 / rho), poisson_gaussian_weights(rho, sigma2)


def _weights(model: ForwardModel, W) -> np.ndarray:
    w = np.ones(model.m) if W is None else np.asarray(W, dtype=float).ravel()
    if w.shape != (model.m,):
        raise DimensionError("weights do not match the measurement count")
    return w


def spatial_strength(model: ForwardModel, W=None) -> np.ndarray:
    """``psi_n = sqrt(sum_l A_ln^2 W_l) / sqrt(sum_l A_ln^2)`` as an image.

    Unobserved pixels (zero columns) get ``psi = 0`` with a warning.
    """
    w = _weights(model, W)
    num = model.sq_adjoint(w)
    den = model.sq_adjoint(np.ones(model.m))
    psi = np.zeros(model.n)
    seen = den > 0
    if not np.all(seen):
        warnings.warn(f"{int(np.sum(~seen))} pixels are not observed; psi set to 0")
    psi[seen] = np.sqrt(num[seen] / den[seen])
    return psi.reshape(model.image_shape)


def threshold_levels(alpha_prime, psi=None, K: int | None = None):
    """Hard-threshold levels ``sqrt(2 alpha'_k psi_n)``.

    Returns a scalar, a length-K vector, an image, or a ``(K, H, W)`` stack,
    following the shapes of `alpha_prime` and `psi`.
    """
    a = np.asarray(alpha_prime, dtype=float)
    if np.any(a < 0):
        raise InvalidParameterError("alpha' must be nonnegative")
    if psi is None:
        return np.sqrt(2.0 * a)
    psi = np.asarray(psi, dtype=float)
    if a.ndim == 0:
        return np.sqrt(2.0 * a * psi)
    return np.sqrt(2.0 * a[:, None, None] * psi[None])


def _level(thresholds, k):
    t = np.asarray(thresholds, dtype=float)
    if t.ndim == 0 or t.ndim == 2:
        return t
    return t[k]


def autoencode(x, bank: FilterBank, thresholds=0.0, bc: str = CIRCULAR) -> np.ndarray:
    """Convolutional autoencoder ``sum_k Psi_k^T H_{a_k}(d_k * x)``.

    ``Psi_k^T`` is the exact adjoint of ``x -> d_k * x``. For circular
    boundaries and odd filter sizes it is convolution with the flipped
    filter.

    Parameters
    ----------
    thresholds : float, (K,), (H, W) or (K, H, W)
        Threshold levels, any of a single level, one per filter, one per
        pixel, or one per filter and pixel.
    """
    x = as_image(x)
    out = np.zeros_like(x)
    for k, f in enumerate(bank.filters):
        z = hard_threshold(conv_same(f, x, bc), _level(thresholds, k))
        out += conv_adjoint(f, z, bc)
    return out


@dataclass
class ReconConfig:
    gamma: float = 1.0
    alpha_prime: object = 1e-4
    lambda_A: float = bpegm.DEFAULT_LAMBDA
    use_psi: bool = False
    tol: float = 1e-5
    max_iter: int = 2000
    delta: float = 0.99
    omega: float = 0.0
    extrapolation: bool = True
    restart: bool = True
    bc: str = CIRCULAR
    track_block_objectives: bool = False
    check_monotone: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise InvalidParameterError("gamma must be nonnegative")
        if np.any(np.asarray(self.alpha_prime, dtype=float) < 0):
            raise InvalidParameterError("alpha' must be nonnegative")
        if not self.lambda_A > 1:
            raise InvalidParameterError("lambda_A must be > 1")


@dataclass
class ReconResult:
    x: np.ndarray
    records: list
    converged: bool
    blocks: list = field(repr=False, default_factory=list)
    state: dict = field(repr=False, default_factory=dict)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    def fixed_point_residuals(self) -> dict:
        return {b.name: bpegm.fixed_point_residual(b, self.state) for b in self.blocks}


class MbirProblem:
    """Objective, oracles and blocks of the reconstruction problem."""

    def __init__(self, y, model: ForwardModel, W, bank: FilterBank, config: ReconConfig):
        self.y = np.ravel(np.asarray(y, dtype=float))
        if self.y.size != model.m:
            raise DimensionError("measurements do not match the forward model")
        self.model, self.bank, self.cfg = model, bank, config
        if bank.shape[0] > model.image_shape[0] or bank.shape[1] > model.image_shape[1]:
            raise DimensionError("filters are larger than the image")
        self.w = _weights(model, W)
        if np.any(self.w < 0):
            raise InvalidParameterError("weights must be nonnegative")
        if orthogonality_residual(bank) > 1e-8 or (
                bank.R > 1 and config.bc != CIRCULAR
                and (bank.shape[0] % 2 == 0 or bank.shape[1] % 2 == 0)):
            warnings.warn("filter bank is not a tight frame for this boundary "
                          "condition; the image update is then inexact")
        self.psi = spatial_strength(model, self.w) if config.use_psi else None
        self.levels = threshold_levels(config.alpha_prime, self.psi, bank.K)
        self.alpha_map = self._alpha_map()
        MA = diag_weighted_normal(model, self.w)
        d = MA.data.copy()
        # unobserved pixels carry no data gradient; any positive curvature works
        floor = 1e-12 * float(d.max()) if d.max() > 0 else 1.0
        d[d <= 0] = floor
        self.MA = Majorizer(DIAGONAL, d)

    def _alpha_map(self):
        a = np.asarray(self.cfg.alpha_prime, dtype=float)
        psi = np.ones(self.model.image_shape) if self.psi is None else self.psi
        if a.ndim == 0:
            return np.broadcast_to(a * psi, (self.bank.K,) + psi.shape)
        return a[:, None, None] * psi[None]

    def responses(self, x):
        return np.array([conv_same(f, x, self.cfg.bc) for f in self.bank.filters])

    def codes(self, x):
        return np.array([hard_threshold(c, _level(self.levels, k))
                         for k, c in enumerate(self.responses(x))])

    def data_term(self, x) -> float:
        r = self.model.apply(x) - self.y
        return 0.5 * float(np.sum(self.w * r * r))

    def objective(self, xs) -> float:
        x, Z = xs["x"], xs["Z"]
        F = self.data_term(x)
        if self.cfg.gamma:
            r = self.responses(x) - Z
            F += self.cfg.gamma * (0.5 * float(np.sum(r * r))
                                   + float(np.sum(self.alpha_map[Z != 0])))
        return F

    def objective_min_z(self, x) -> float:
        """The objective with the sparse codes minimized in closed form."""
        return self.objective({"x": x, "Z": self.codes(x)})

    def grad_x(self, xs):
        x = xs["x"]
        r = self.model.apply(x) - self.y
        return self.model.adjoint(self.w * r)

    def prox_x(self, point, Mt, xs):
        m = Mt.data.reshape(self.model.image_shape)
        g = self.cfg.gamma
        if not g:
            return np.maximum(point, 0.0)
        back = sum(conv_adjoint(f, z, self.cfg.bc)
                   for f, z in zip(self.bank.filters, xs["Z"]))
        return np.maximum((m * point + g * back) / (m + g), 0.0)

    def blocks(self) -> list:
        cfg = self.cfg
        return [
            bpegm.Block("Z", minimize=lambda xs: self.codes(xs["x"])),
            bpegm.Block("x", grad=self.grad_x, prox=self.prox_x, majorizer=self.MA,
                        lam=cfg.lambda_A),
        ]

    def initial_image(self) -> np.ndarray:
        """Diagonally preconditioned back-projection, clamped at zero."""
        b = self.model.adjoint(self.w * self.y).ravel()
        return np.maximum(b / self.MA.data, 0.0).reshape(self.model.image_shape)


def x_update(x, x_prev, y, model: ForwardModel, W, bank: FilterBank, psi,
             config: ReconConfig, e: float = 0.0) -> np.ndarray:
    """One image update from ``x`` given the codes of ``x``.

    ``e`` is the momentum coefficient; the extrapolation matrix is the scalar
    ``e delta (lam-1) / (2 (lam+1))`` since ``M_A`` is fixed.
    """
    cfg = config
    prob = MbirProblem(y, model, W, bank, cfg)
    if psi is not None:
        prob.psi = np.asarray(psi, dtype=float)
        prob.levels = threshold_levels(cfg.alpha_prime, prob.psi, bank.K)
        prob.alpha_map = prob._alpha_map()
    x = as_image(x)
    s = bpegm.extrapolation_scale(e, cfg.lambda_A, cfg.delta)
    x_acc = x + s * (x - np.asarray(x_prev, dtype=float))
    xs = {"x": x_acc, "Z": prob.codes(x)}
    Mt = prob.MA.scale(cfg.lambda_A)
    eta = x_acc - Mt.solve(prob.grad_x(xs))
    return prob.prox_x(eta, Mt, xs)


def reconstruct(y, model: ForwardModel, W, bank: FilterBank,
                config: ReconConfig | None = None, x0=None, callback=None) -> ReconResult:
    """Reconstruct an image by reBPEG-M.

    Parameters
    ----------
    y : array_like
        Measurements, length ``model.m``.
    model : ForwardModel
    W : array_like or None
        Diagonal weights (default all ones).
    bank : FilterBank
        Learned filters, ideally a tight frame.
    config : ReconConfig
    x0 : array_like, optional
        Initial image; default is the clamped, diagonally preconditioned
        back-projection.

    Returns
    -------
    ReconResult
    """
    cfg = config or ReconConfig()
    prob = MbirProblem(y, model, W, bank, cfg)
    x0 = prob.initial_image() if x0 is None else np.maximum(as_image(x0), 0.0)
    if x0.shape != model.image_shape:
        raise DimensionError("initial image does not match the forward model")
    blocks = prob.blocks()
    scfg = bpegm.SolverConfig(
        delta=cfg.delta, omega=cfg.omega, tol=cfg.tol, max_iter=cfg.max_iter,
        extrapolation=cfg.extrapolation, restart=cfg.restart,
        track_block_objectives=cfg.track_block_objectives,
        check_monotone=cfg.check_monotone, callback=callback)
    res = bpegm.solve(blocks, prob.objective, {"x": x0, "Z": prob.codes(x0)}, scfg)
    return ReconResult(res.x["x"], res.records, res.converged, blocks, res.x)


def wls_baseline(y, model: ForwardModel, W=None, iter_lim: int = 500,
                 clamp: bool = False) -> np.ndarray:
    """Unregularized weighted least squares by LSQR on ``W^{1/2} A x = W^{1/2} y``."""
    sw = np.sqrt(_weights(model, W))
    Aw = sp.diags(sw) @ model.A
    x = lsqr(Aw, sw * np.ravel(y), atol=1e-10, btol=1e-10, iter_lim=iter_lim)[0]
    x = x.reshape(model.image_shape)
    return np.maximum(x, 0.0) if clamp else x


def suggest_alpha_prime(sigma: float, R: int, k: float = 3.0) -> float:
    """Threshold weight that kills ``k``-sigma noise responses of a TF bank.

    Tight-frame filters have ``||d_k||^2 = 1/R`` on average, so white noise
    of level `sigma` gives responses of level ``sigma / sqrt(R)``.
    """
    return 0.5 * (k * sigma) ** 2 / R


def metrics(x, x_ref, roi=None, peak: float | None = None) -> dict:
    """RMSE and PSNR over a region of interest (boolean mask)."""
    x, x_ref = np.asarray(x, dtype=float), np.asarray(x_ref, dtype=float)
    if x.shape != x_ref.shape:
        raise DimensionError("image and reference differ in shape")
    roi = np.ones(x.shape, dtype=bool) if roi is None else np.asarray(roi, dtype=bool)
    if roi.shape != x.shape:
        raise DimensionError("roi does not match the image shape")
    if not roi.any():
        raise InputError("empty region of interest")
    err = x[roi] - x_ref[roi]
    rmse = float(np.sqrt(np.mean(err * err)))
    if peak is None:
        ref = x_ref[roi]
        peak = float(ref.max() - ref.min()) or 1.0
    psnr = math.inf if rmse == 0 else 20.0 * math.log10(peak / rmse)
    return {"rmse": rmse, "psnr": psnr}
