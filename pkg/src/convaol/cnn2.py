"""Unsupervised training of a two-layer CNN (convolution, thresholding, pooling).

The model couples

    sum_k 1/2 ||d1_k * x - z1_k||^2 + alpha1 ||z1||_0
    + 1/2 sum_k' ||sum_k d2_{k,k'} * P z1_k - z2_k'||^2 + alpha2 ||z2||_0

with tight-frame constraints on the first-layer bank and on every
second-layer bank ``D2_k``. ``P`` is average pooling. The blocks are updated
in the order D1, z1_1..z1_K1, D2_1..D2_K1, Z2.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import bpegm
from .caol import CaolConfig, CaolProblem, hard_threshold, init_filters, prox_orthogonal
from .convops import (CIRCULAR, FilterBank, as_image, conv_adjoint, conv_same,
                      orthogonality_residual, pad_for_filter, psi_adjoint)
from .errors import (DimensionError, FormatError, InputError, InvalidParameterError,
                     PaddingRequiredError, UnsupportedShapeError)
from .imageio import bank_from_bytes, bank_to_bytes
from .majorizers import DENSE, SCALED_IDENTITY, Majorizer, TrainingSet

MODEL_MAGIC = b"CAOLCNN0"


def pool_window(omega, image_shape) -> tuple[int, int]:
    """Resolve a pooling size to a ``(rows, cols)`` window.

    An integer ``omega`` means a ``1 x omega`` window on single-row images and
    a ``sqrt(omega) x sqrt(omega)`` window otherwise (``omega`` must then be a
    perfect square). A pair is taken as the window itself.
    """
    if np.ndim(omega) == 1:
        ph, pw = (int(v) for v in omega)
    else:
        omega = int(omega)
        if image_shape[0] == 1:
            ph, pw = 1, omega
        else:
            s = math.isqrt(omega)
            if s * s != omega:
                raise InputError(f"pooling size {omega} is not a square; "
                                 "pass an explicit (rows, cols) window")
            ph = pw = s
    if ph < 1 or pw < 1:
        raise InputError("pooling window must be positive")
    return ph, pw


def avg_pool(z, omega) -> np.ndarray:
    """Block means over non-overlapping windows."""
    z = as_image(z)
    ph, pw = pool_window(omega, z.shape)
    H, W = z.shape
    if H % ph or W % pw:
        raise PaddingRequiredError(
            f"image {z.shape} is not divisible by the pooling window {(ph, pw)}")
    return z.reshape(H // ph, ph, W // pw, pw).mean(axis=(1, 3))


def avg_pool_adjoint(u, omega, image_shape) -> np.ndarray:
    """``P^T u``: replicate each pooled value over its window, scaled by 1/omega.

    ``image_shape`` is the unpooled size, needed to resolve an integer ``omega``.
    """
    u = as_image(u)
    ph, pw = pool_window(omega, image_shape)
    if u.shape != (image_shape[0] // ph, image_shape[1] // pw):
        raise DimensionError("pooled array does not match the image size")
    return np.kron(u, np.ones((ph, pw))) / (ph * pw)


def pooling_matrix(image_shape, omega) -> np.ndarray:
    """Dense ``P`` for small images (rows index pooled pixels, row-major)."""
    H, W = image_shape
    ph, pw = pool_window(omega, image_shape)
    if H % ph or W % pw:
        raise PaddingRequiredError("image not divisible by the pooling window")
    P = np.zeros(((H // ph) * (W // pw), H * W))
    for i in range(H):
        for j in range(W):
            P[(i // ph) * (W // pw) + j // pw, i * W + j] = 1.0 / (ph * pw)
    return P


def pooling_gap_exact(image_shape, omega) -> bool:
    """Exact check that ``I/omega - P^T P`` is PSD, in rational arithmetic.

    ``omega P^T P`` has entries ``1/omega`` inside each pooling window, so it
    is PSD-dominated by the identity iff it is idempotent (an orthogonal
    projector); that is verified entry by entry with fractions.
    """
    H, W = image_shape
    ph, pw = pool_window(omega, image_shape)
    w = ph * pw
    n = H * W
    if H % ph or W % pw:
        raise PaddingRequiredError("image not divisible by the pooling window")
    group = [((i // ph) * (W // pw) + (j // pw)) for i in range(H) for j in range(W)]
    Q = [[Fraction(1, w) if group[a] == group[b] else Fraction(0) for b in range(n)]
         for a in range(n)]
    for a in range(n):
        for b in range(n):
            s = sum((Q[a][c] * Q[c][b] for c in range(n) if Q[a][c]), Fraction(0))
            if s != Q[a][b] or Q[a][b] != Q[b][a]:
                return False
    return True


def layer1_feature_update(c, zeta, alpha1: float, omega_prime: float) -> np.ndarray:
    """Exact minimizer of ``1/2 (c - z)^2 + (z - zeta)^2 / (2 w) + alpha1 [z != 0]``.

    With ``w = omega_prime`` the quadratic part is minimized at
    ``m = (w c + zeta) / (w + 1)`` with curvature ``(w + 1) / w``, so the
    answer is ``H_a(m)`` with ``a = sqrt(2 alpha1 w / (w + 1))``.
    """
    if omega_prime <= 0:
        raise InvalidParameterError("omega' must be positive")
    c = np.asarray(c, dtype=float)
    m = (omega_prime * c + np.asarray(zeta, dtype=float)) / (omega_prime + 1.0)
    return hard_threshold(m, math.sqrt(2.0 * alpha1 * omega_prime / (omega_prime + 1.0)))


def layer2_feature_update(D2, pooled, alpha2: float, bc: str = CIRCULAR) -> np.ndarray:
    """``z2_k' = H_{sqrt(2 alpha2)}(sum_k d2_{k,k'} * P z1_k)`` for one image.

    Parameters
    ----------
    D2 : list of FilterBank
        One bank per first-layer channel.
    pooled : sequence of images
        ``P z1_k`` for each first-layer channel.
    """
    return hard_threshold(_layer2_responses(D2, pooled, bc), math.sqrt(2.0 * alpha2))


def _layer2_responses(D2, pooled, bc):
    K2 = D2[0].K if D2 else 0
    shape = np.shape(pooled[0])
    out = np.zeros((K2,) + shape)
    for bank, u in zip(D2, pooled):
        for kp, f in enumerate(bank.filters):
            out[kp] += conv_same(f, u, bc)
    return out


@dataclass
class CnnConfig:
    K1: int = 9
    K2: int = 9
    shape1: tuple = (3, 3)
    shape2: tuple = (3, 3)
    omega: object = 4
    alpha1: float = 1e-3
    alpha2: float = 1e-3
    lambda_D: float = bpegm.DEFAULT_LAMBDA
    lambda_Z: float = bpegm.DEFAULT_LAMBDA
    init: str = "random"
    seed: int | None = 0
    bc: str = CIRCULAR
    tol: float = 1e-6
    max_iter: int = 500
    delta: float = 0.99
    omega_restart: float = 0.0
    extrapolation: bool = True
    restart: bool = True
    track_block_objectives: bool = False
    check_monotone: bool = True

    def __post_init__(self):
        R1 = self.shape1[0] * self.shape1[1]
        R2 = self.shape2[0] * self.shape2[1]
        if R1 > self.K1:
            raise UnsupportedShapeError("first layer needs R1 <= K1")
        if self.K2 and R2 > self.K2:
            raise UnsupportedShapeError("second layer needs R2 <= K2")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise InvalidParameterError("alphas must be nonnegative")
        if not (self.lambda_D > 1 and self.lambda_Z > 1):
            raise InvalidParameterError("lambdas must be > 1")


@dataclass
class TwoLayerModel:
    D1: FilterBank
    D2: list
    Z1: np.ndarray                # (L, K1, H, W)
    Z2: np.ndarray                # (L, K2, H/ph, W/pw)
    omega: tuple
    records: list = field(default_factory=list)
    converged: bool = False
    blocks: list = field(repr=False, default_factory=list)
    state: dict = field(repr=False, default_factory=dict)

    @property
    def objectives(self):
        return np.array([r.objective for r in self.records])

    def fixed_point_residuals(self) -> dict:
        return {b.name: bpegm.fixed_point_residual(b, self.state) for b in self.blocks}

    def to_bytes(self) -> bytes:
        K2 = self.D2[0].K if self.D2 else 0
        R2 = self.D2[0].R if self.D2 else 0
        ph, pw = self.omega
        head = MODEL_MAGIC + struct.pack("<7I", self.D1.K, K2, self.D1.R, R2,
                                         ph * pw, ph, pw)
        return head + bank_to_bytes(self.D1) + b"".join(bank_to_bytes(b) for b in self.D2)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


def load_model_banks(data: bytes):
    """Parse a saved model: returns ``(D1, D2 list, (ph, pw))``."""
    if data[:8] != MODEL_MAGIC:
        raise FormatError("not a two-layer model (bad magic)")
    K1, K2, R1, R2, w, ph, pw = struct.unpack("<7I", data[8:36])
    if ph * pw != w:
        raise FormatError("inconsistent pooling header")
    D1, off = bank_from_bytes(data, 36)
    D2 = []
    for _ in range(K1 if K2 else 0):
        b, off = bank_from_bytes(data, off)
        D2.append(b)
    if off != len(data) or D1.K != K1 or D1.R != R1 or any(
            b.K != K2 or b.R != R2 for b in D2):
        raise FormatError("model header does not match its filter banks")
    return D1, D2, (ph, pw)


class CnnProblem:
    def __init__(self, images, cfg: CnnConfig):
        self.images = [as_image(x) for x in images]
        self.cfg = cfg
        self.L = len(self.images)
        self.shape = self.images[0].shape
        self.win = pool_window(cfg.omega, self.shape)
        self.w = self.win[0] * self.win[1]
        if self.shape[0] % self.win[0] or self.shape[1] % self.win[1]:
            raise PaddingRequiredError("image size is not divisible by the pooling window")
        self.small = (self.shape[0] // self.win[0], self.shape[1] // self.win[1])
        if cfg.K2 and (cfg.shape2[0] > self.small[0] or cfg.shape2[1] > self.small[1]):
            raise DimensionError("second-layer filters exceed the pooled size")
        self.ts = TrainingSet(self.images, cfg.shape1, cfg.bc)
        ccfg = CaolConfig(alpha=max(cfg.alpha1, 1e-300), K=cfg.K1,
                          lambda_D=cfg.lambda_D)
        self.caol = CaolProblem(self.ts, ccfg)
        self.caol.thr = math.sqrt(2.0 * cfg.alpha1)
        self.M1 = Majorizer(DENSE, self.caol.H)
        self.N = self.shape[0] * self.shape[1]
        self.z1_names = [f"Z1_{k}" for k in range(cfg.K1)] if cfg.K2 else ["Z1"]
        self.d2_names = [f"D2_{k}" for k in range(cfg.K1)] if cfg.K2 else []

    # -- layout helpers --------------------------------------------------
    def Z1_matrix(self, xs) -> np.ndarray:
        """First-layer codes as the ``(L*N) x K1`` matrix used by the D1 step."""
        if "Z1" in xs:
            return xs["Z1"]
        return np.stack([xs[n] for n in self.z1_names], axis=1)

    def z1_images(self, xs, k) -> np.ndarray:
        return self.Z1_matrix(xs)[:, k].reshape((self.L,) + self.shape) \
            if "Z1" in xs else xs[self.z1_names[k]].reshape((self.L,) + self.shape)

    def pooled(self, xs, k) -> list:
        return [avg_pool(z, self.win) for z in self.z1_images(xs, k)]

    def banks2(self, xs) -> list:
        return [FilterBank(xs[n], self.cfg.shape2) for n in self.d2_names]

    def layer2_resp(self, xs, pooled_all=None) -> np.ndarray:
        """``(L, K2, h, w)`` second-layer pre-threshold responses."""
        banks = self.banks2(xs)
        pooled_all = pooled_all or [self.pooled(xs, k) for k in range(self.cfg.K1)]
        return np.array([_layer2_responses(banks, [pooled_all[k][l] for k in range(self.cfg.K1)],
                                           self.cfg.bc) for l in range(self.L)])

    # -- objective ---------------------------------------------------------
    def objective(self, xs) -> float:
        cfg = self.cfg
        Z1 = self.Z1_matrix(xs)
        r = (self.caol.responses(xs["D1"]) - Z1).ravel()
        F = 0.5 * float(r @ r) + cfg.alpha1 * float(np.count_nonzero(Z1))
        if cfg.K2:
            r2 = self.layer2_resp(xs) - xs["Z2"]
            F += 0.5 * float(np.sum(r2 * r2)) + cfg.alpha2 * float(np.count_nonzero(xs["Z2"]))
        return F

    # -- D1 ---------------------------------------------------------------
    def grad_D1(self, xs):
        return self.caol.H @ xs["D1"] - self.caol.P2.T @ self.Z1_matrix(xs)

    def prox_D(self, point, Mt, xs):
        return prox_orthogonal(point, Mt)

    # -- Z1 -----------------------------------------------------------------
    def z1_block(self, k) -> bpegm.Block:
        cfg = self.cfg
        name = self.z1_names[k]

        def grad(xs):
            r2 = self.layer2_resp(xs) - xs["Z2"]          # (L, K2, h, w)
            bank = FilterBank(xs[self.d2_names[k]], cfg.shape2)
            g = np.zeros((self.L,) + self.shape)
            for l in range(self.L):
                back = sum(conv_adjoint(f, r2[l, kp], cfg.bc)
                           for kp, f in enumerate(bank.filters))
                g[l] = np.kron(back, np.ones(self.win)) / self.w
            return g.reshape(-1)

        def prox(point, Mt, xs):
            c = (self.caol.P2 @ xs["D1"][:, k])
            return layer1_feature_update(c, point, cfg.alpha1, 1.0 / Mt.data)

        M = Majorizer(SCALED_IDENTITY, 1.0 / self.w, self.L * self.N)
        return bpegm.Block(name, grad=grad, prox=prox, majorizer=M, lam=cfg.lambda_Z)

    # -- D2 ---------------------------------------------------------------
    def d2_block(self, k) -> bpegm.Block:
        cfg = self.cfg
        name = self.d2_names[k]

        def hess(xs):
            H = np.zeros((len(xs[name]),) * 2)
            for u in self.pooled(xs, k):
                P = TrainingSet([u], cfg.shape2, cfg.bc).patches().P[0]
                H += P.T @ P
            # ridge keeps the record PD when the pooled features vanish
            return Majorizer(DENSE, H + 1e-12 * max(float(np.trace(H)), 1.0) * np.eye(len(H)))

        def grad(xs):
            r2 = self.layer2_resp(xs) - xs["Z2"]
            G = np.zeros_like(xs[name])
            for l, u in enumerate(self.pooled(xs, k)):
                uhat = pad_for_filter(u, cfg.shape2, cfg.bc)
                for kp in range(cfg.K2):
                    G[:, kp] += psi_adjoint(uhat, r2[l, kp], cfg.shape2).ravel()
            return G

        return bpegm.Block(name, grad=grad, prox=self.prox_D, majorizer=hess,
                           lam=cfg.lambda_D, extrapolate=False)

    def z2_codes(self, xs):
        return hard_threshold(self.layer2_resp(xs), math.sqrt(2.0 * self.cfg.alpha2))

    def blocks(self) -> list:
        cfg = self.cfg
        out = [bpegm.Block("D1", grad=self.grad_D1, prox=self.prox_D,
                           majorizer=self.M1, lam=cfg.lambda_D)]
        if not cfg.K2:
            out.append(bpegm.Block("Z1", minimize=lambda xs: self.caol.codes(xs["D1"])))
            return out
        out += [self.z1_block(k) for k in range(cfg.K1)]
        out += [self.d2_block(k) for k in range(cfg.K1)]
        out.append(bpegm.Block("Z2", minimize=self.z2_codes))
        return out


def train_two_layer(x, config: CnnConfig | None = None, D1_0: FilterBank | None = None,
                    D2_0: list | None = None, callback=None) -> TwoLayerModel:
    """Train the two-layer model on one image or a list of same-size images."""
    cfg = config or CnnConfig()
    images = [x] if np.ndim(x) == 2 else list(x)
    prob = CnnProblem(images, cfg)
    D1 = D1_0 or init_filters(cfg.shape1, cfg.K1, cfg.init, cfg.seed)
    x0 = {"D1": D1.D}
    Z1 = prob.caol.codes(D1.D)
    feasible = orthogonality_residual(D1.D) <= 1e-10
    if cfg.K2:
        for k, n in enumerate(prob.z1_names):
            x0[n] = Z1[:, k].copy()
        seed = None if cfg.seed is None else cfg.seed + 1
        rng = np.random.default_rng(seed)
        for k, n in enumerate(prob.d2_names):
            if D2_0 is not None:
                B = D2_0[k]
            else:
                mode = "deterministic" if (cfg.init == "deterministic"
                                           and cfg.K2 == cfg.shape2[0] * cfg.shape2[1]
                                           and cfg.shape2[0] == cfg.shape2[1]) else "random"
                B = init_filters(cfg.shape2, cfg.K2, mode, int(rng.integers(2 ** 31)))
            x0[n] = B.D
            feasible = feasible and orthogonality_residual(B.D) <= 1e-10
        x0["Z2"] = prob.z2_codes(x0)
    else:
        x0["Z1"] = Z1
    blocks = prob.blocks()
    scfg = bpegm.SolverConfig(
        delta=cfg.delta, omega=cfg.omega_restart, tol=cfg.tol, max_iter=cfg.max_iter,
        extrapolation=cfg.extrapolation, restart=cfg.restart,
        track_block_objectives=cfg.track_block_objectives,
        check_monotone=cfg.check_monotone, monotone_start=1 if feasible else 2,
        callback=callback)
    res = bpegm.solve(blocks, prob.objective, x0, scfg)
    xs = res.x
    Z1m = prob.Z1_matrix(xs)
    H, W = prob.shape
    Z1img = np.moveaxis(Z1m.reshape(prob.L, H, W, cfg.K1), -1, 1)
    Z2 = xs["Z2"] if cfg.K2 else np.zeros((prob.L, 0) + prob.small)
    return TwoLayerModel(FilterBank(xs["D1"], cfg.shape1), prob.banks2(xs), Z1img, Z2,
                         prob.win, res.records, res.converged, blocks, xs)
