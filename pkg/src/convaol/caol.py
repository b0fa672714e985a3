"""Convolutional analysis operator learning.

Two trainers solve

    min_D min_Z  sum_{l,k} 1/2 ||d_k * x_l - z_{l,k}||^2 + alpha ||z_{l,k}||_0

either under the tight-frame constraint ``D D^T = I / R`` (model
``"orthogonal"``) or with the diversity penalty ``beta/2 ||D^T D - I/R||_F^2``
and unit-energy filters ``||d_k||^2 = 1/R`` (model ``"diversity"``). Both run
as two-block reBPEG-M: a majorized filter step, then exact hard-thresholding
of the sparse codes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct

from . import bpegm
from .convops import (FilterBank, conv_same, orthogonality_residual,
                      pad_for_filter, psi_adjoint, tf_residual)
from .errors import (DimensionError, InvalidParameterError, InvalidThresholdError,
                     SolverFailureError, UnsupportedShapeError)
from .majorizers import DENSE, Majorizer, TrainingSet, exact_hessian, filter_majorizer

ORTHOGONAL = "orthogonal"
DIVERSITY = "diversity"
MAJORIZER_KINDS = ("exact", "diagonal", "scaled_identity", "lipschitz")

NEWTON_TOL = 1e-12
NEWTON_MAXITER = 200


# -- preprocessing -----------------------------------------------------------

def rescale01(x) -> np.ndarray:
    """Affinely map an image onto [0, 1] (constant images map to 0)."""
    x = np.asarray(x, dtype=float)
    lo, hi = float(x.min()), float(x.max())
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def preprocess(images, rescale: bool = True, mean_subtract: bool = True) -> list:
    """Per-image intensity rescaling to [0, 1], then global mean removal."""
    out = []
    for x in images:
        x = rescale01(x) if rescale else np.asarray(x, dtype=float)
        if mean_subtract:
            x = x - x.mean()
        out.append(x)
    return out


# -- sparse codes -------------------------------------------------------------

def hard_threshold(v, a) -> np.ndarray:
    """Keep entries with ``|v| >= a``, zero the rest."""
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    if np.any(a < 0) or np.any(np.isnan(a)):
        raise InvalidThresholdError("thresholds must be nonnegative")
    return np.where(np.abs(v) >= a, v, 0.0)


def _responses(D: FilterBank, ts: TrainingSet) -> np.ndarray:
    """``d_k * x_l`` for all pairs, shape ``(L, K, H, W)``, by direct convolution."""
    if D.shape != ts.shape:
        raise DimensionError(f"filter shape {D.shape} differs from training "
                             f"shape {ts.shape}")
    return np.array([[conv_same(f, x, ts.bc) for f in D.filters] for x in ts.images])


def sparse_code_exact(D: FilterBank, ts: TrainingSet, alpha: float) -> np.ndarray:
    """Exact code update ``z_{l,k} = H_{sqrt(2 alpha)}(d_k * x_l)``, shape (L, K, H, W)."""
    if alpha < 0:
        raise InvalidParameterError("alpha must be nonnegative")
    return hard_threshold(_responses(D, ts), math.sqrt(2.0 * alpha))


def sparse_code_bpegm(D: FilterBank, ts: TrainingSet, alpha: float, lambda_Z: float,
                      Z_prev, extrapolation: float = 0.0, Z_older=None) -> np.ndarray:
    """Majorized code update with inflation `lambda_Z`.

    ``zeta = (1 - 1/lambda_Z) z_acc + (1/lambda_Z) d * x`` and
    ``z = H_{sqrt(2 alpha / lambda_Z)}(zeta)``, where
    ``z_acc = Z_prev + extrapolation * (Z_prev - Z_older)``.
    """
    if not lambda_Z > 1:
        raise InvalidParameterError("lambda_Z must be > 1")
    Z_prev = np.asarray(Z_prev, dtype=float)
    z_acc = Z_prev
    if extrapolation:
        z_acc = Z_prev + extrapolation * (Z_prev - np.asarray(Z_older, dtype=float))
    c = _responses(D, ts)
    zeta = (1.0 - 1.0 / lambda_Z) * z_acc + c / lambda_Z
    return hard_threshold(zeta, math.sqrt(2.0 * alpha / lambda_Z))


def objective_P0(D: FilterBank, Z, ts: TrainingSet, alpha: float) -> float:
    """``sum_{l,k} 1/2 ||d_k * x_l - z_{l,k}||^2 + alpha ||z_{l,k}||_0``."""
    Z = np.asarray(Z, dtype=float)
    r = _responses(D, ts) - Z
    return 0.5 * float(np.sum(r * r)) + alpha * float(np.count_nonzero(Z))


def filter_gradient(D: FilterBank, Z, ts: TrainingSet) -> np.ndarray:
    """``sum_l Psi_l^T (Psi_l d_k - z_{l,k})`` for every k, as an R x K matrix."""
    Z = np.asarray(Z, dtype=float)
    G = np.zeros((D.R, D.K))
    for l, x in enumerate(ts.images):
        xhat = pad_for_filter(x, ts.shape, ts.bc)
        for k, f in enumerate(D.filters):
            res = conv_same(f, x, ts.bc) - Z[l, k]
            G[:, k] += psi_adjoint(xhat, res, ts.shape).ravel()
    return G


# -- filter proximal maps -----------------------------------------------------

def _as_majorizer(M, R: int) -> Majorizer:
    if isinstance(M, Majorizer):
        return M
    M = np.asarray(M, dtype=float)
    if M.ndim == 0:
        return Majorizer("scaled_identity", float(M), R)
    if M.ndim == 1:
        return Majorizer("diagonal", M)
    return Majorizer(DENSE, M)


def prox_orthogonal(V, Mtilde) -> np.ndarray:
    """Minimize ``||Mt^{1/2}(D - V)||_F^2`` subject to ``D D^T = I / R``.

    With the SVD ``Mt V = U S W^T`` the minimizer is ``U W^T / sqrt(R)``.
    """
    V = np.asarray(V, dtype=float)
    R, K = V.shape
    if R > K:
        raise UnsupportedShapeError(
            f"D D^T = I/R is infeasible with R = {R} > K = {K}")
    A = _as_majorizer(Mtilde, R).matvec(V)
    U, _, Wt = np.linalg.svd(A, full_matrices=False)
    return (U @ Wt) / math.sqrt(R)


def gram_complement(D, k: int) -> np.ndarray:
    """``Gamma_k = sum_{k' != k} d_{k'} d_{k'}^T``."""
    D = D.D if isinstance(D, FilterBank) else np.asarray(D, dtype=float)
    others = np.delete(D, k, axis=1)
    return others @ others.T


def g_div(D) -> float:
    """Coherence penalty ``||D^T D - I / R||_F^2``."""
    D = D.D if isinstance(D, FilterBank) else np.asarray(D, dtype=float)
    R, K = D.shape
    return float(np.sum((D.T @ D - np.eye(K) / R) ** 2))


@dataclass
class SecularSolution:
    d: np.ndarray
    phi: float
    iterations: int
    hard_case: bool = False


def solve_norm_qp(G, g, R: int, tol: float = NEWTON_TOL,
                  maxiter: int = NEWTON_MAXITER) -> SecularSolution:
    """Minimize ``1/2 d^T G d - g^T d`` subject to ``||d||^2 = 1/R``.

    The minimizer is ``d = (G + phi I)^{-1} g`` where ``phi > -sigma_min``
    solves ``f(phi) = sum_r gt_r^2 / (phi + sigma_r)^2 = 1/R`` with
    ``G = Q diag(sigma) Q^T`` and ``gt = Q^T g``. Newton's method is applied to
    ``1/sqrt(f) - sqrt(R)``, which is nearly linear in ``phi``; its step is
    ``phi <- phi - 2 (f / f') (sqrt(R f) - 1)``. Iterates are kept in the
    shifted variable ``t = phi + sigma_min`` starting from ``t = 1e-10``.
    """
    G = np.asarray(G, dtype=float)
    g = np.asarray(g, dtype=float).ravel()
    target = 1.0 / R
    sigma, Q = np.linalg.eigh(0.5 * (G + G.T))
    gt = Q.T @ g
    s_min = sigma[0]
    if np.all(gt == 0):
        d = Q[:, 0] / math.sqrt(R)
        return SecularSolution(d, -s_min, 0, hard_case=True)

    # unconstrained minimizer already feasible
    if s_min > 0:
        d0 = Q @ (gt / sigma)
        if abs(float(d0 @ d0) * R - 1.0) <= tol:
            return SecularSolution(d0, 0.0, 0)

    act = gt != 0
    ga, sa = gt[act], sigma[act] - s_min      # shifted eigenvalues >= 0
    lo = float(sa.min())                      # pole of the reduced secular sum

    def f_and_df(t):
        w = 1.0 / (t + sa)
        q = ga * ga * w * w
        return float(q.sum()), float(-2.0 * (q * w).sum())

    hard = False
    if lo > 0:
        # a zero-weight mode sits at sigma_min; check whether the root lies left of it
        f0, _ = f_and_df(0.0)
        if f0 <= target:
            hard = True
    if hard:
        t = 0.0
        core = ga / sa
        tau2 = target - float(core @ core)
        coeffs = np.zeros_like(gt)
        coeffs[act] = core
        coeffs[0] += math.sqrt(max(tau2, 0.0))
        return SecularSolution(Q @ coeffs, -s_min, 0, hard_case=True)

    t = 1e-10
    it = 0
    for it in range(1, maxiter + 1):
        f, df = f_and_df(t)
        if abs(f * R - 1.0) <= tol:
            break
        t_new = t - 2.0 * (f / df) * (math.sqrt(R * f) - 1.0)
        if t_new <= -lo:              # guard against jumping past the pole
            t_new = 0.5 * (t - lo)
        t = t_new
    else:
        f, _ = f_and_df(t)
        if abs(f * R - 1.0) > tol:
            raise SolverFailureError(
                f"secular Newton did not converge in {maxiter} iterations "
                f"(|f R - 1| = {abs(f * R - 1.0):.3e})", abs(f * R - 1.0))
    coeffs = np.zeros_like(gt)
    coeffs[act] = ga / (t + sa)
    return SecularSolution(Q @ coeffs, t - s_min, it)


def prox_diversity(nu_k, Mtilde, beta: float, Gamma_k, R: int | None = None,
                   return_info: bool = False):
    """Filter update ``argmin 1/2 ||d - nu||_Mt^2 + beta/2 d^T Gamma d``, ``||d||^2 = 1/R``.

    With ``G = Mt + beta Gamma`` and ``g = Mt nu`` this is the norm-constrained
    quadratic program solved by :func:`solve_norm_qp`.
    """
    nu = np.asarray(nu_k, dtype=float).ravel()
    R = nu.size if R is None else int(R)
    Mt = _as_majorizer(Mtilde, nu.size)
    G = Mt.to_dense() + beta * np.asarray(Gamma_k, dtype=float)
    sol = solve_norm_qp(G, Mt.matvec(nu), R)
    return sol if return_info else sol.d


def prox_diversity_sequential(V, Mtilde, beta: float, D_current) -> np.ndarray:
    """Update the filters one after another with the diversity prox.

    Filter ``k`` sees ``Gamma_k`` from the filters already updated in this
    sweep (Gauss-Seidel order). Holding the others fixed, the penalty
    ``beta/2 g_div`` equals ``beta d_k^T Gamma_k d_k`` plus a constant on the
    constraint set, hence the weight ``2 beta`` in each subproblem.
    """
    V = np.asarray(V, dtype=float)
    R, K = V.shape
    Mt = _as_majorizer(Mtilde, R)
    Md = Mt.to_dense()
    D = np.array(D_current, dtype=float)
    for k in range(K):
        Gamma = gram_complement(D, k)
        D[:, k] = solve_norm_qp(Md + 2.0 * beta * Gamma, Md @ V[:, k], R).d
    return D


# -- initialization -----------------------------------------------------------

def dct_bank(rh: int, rw: int | None = None) -> FilterBank:
    """Separable orthonormal DCT-II basis, scaled so that ``D D^T = I / R``."""
    rw = rh if rw is None else rw
    Ch = dct(np.eye(rh), type=2, norm="ortho", axis=0)
    Cw = dct(np.eye(rw), type=2, norm="ortho", axis=0)
    D = np.kron(Ch, Cw).T / math.sqrt(rh * rw)
    return FilterBank(D, (rh, rw))


def init_filters(shape, K: int, mode: str = "random", seed: int | None = 0) -> FilterBank:
    """Initial filter bank.

    ``"deterministic"`` gives the scaled DCT basis (requires square filters and
    ``K = R``). ``"random"`` draws i.i.d. standard normal taps, sets the first
    filter to the constant vector, and scales every filter to norm ``1/sqrt(R)``.
    """
    rh, rw = int(shape[0]), int(shape[1])
    R = rh * rw
    if mode == "deterministic":
        if K != R or rh != rw:
            raise UnsupportedShapeError(
                "deterministic init needs square filters with K = R")
        return dct_bank(rh)
    if mode != "random":
        raise InvalidParameterError(f"unknown init mode {mode!r}")
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((R, K))
    D[:, 0] = 1.0
    D /= np.linalg.norm(D, axis=0) * math.sqrt(R)
    return FilterBank(D, (rh, rw))


# -- training -----------------------------------------------------------------

@dataclass
class CaolConfig:
    """Training options.

    ``tol=None`` selects 1e-13 for the exact Hessian and 1e-5 otherwise.
    ``majorizer="lipschitz"`` with ``lambda_D=2`` is the plain BPG setting.
    """

    alpha: float = 2.5e-4
    K: int | None = None
    beta: float = 0.0
    model: str = ORTHOGONAL
    majorizer: str = "exact"
    lambda_D: float = bpegm.DEFAULT_LAMBDA
    init: str = "random"
    seed: int | None = 0
    tol: float | None = None
    max_iter: int = 20000
    delta: float = 0.99
    omega: float = 0.0
    extrapolation: bool = True
    restart: bool = True
    track_block_objectives: bool = False
    check_monotone: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidParameterError("alpha must be positive")
        if self.beta < 0:
            raise InvalidParameterError("beta must be nonnegative")
        if self.model not in (ORTHOGONAL, DIVERSITY):
            raise InvalidParameterError(f"unknown model {self.model!r}")
        if self.majorizer not in MAJORIZER_KINDS:
            raise InvalidParameterError(f"unknown majorizer {self.majorizer!r}")
        if not self.lambda_D > 1:
            raise InvalidParameterError("lambda_D must be > 1")

    @property
    def resolved_tol(self) -> float:
        if self.tol is not None:
            return self.tol
        return 1e-13 if self.majorizer == "exact" else 1e-5


@dataclass
class CaolResult:
    bank: FilterBank
    codes: np.ndarray          # (L, K, H, W)
    records: list
    converged: bool
    diagnostics: dict
    blocks: list = field(repr=False, default_factory=list)
    state: dict = field(repr=False, default_factory=dict)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    def fixed_point_residuals(self) -> dict:
        return {b.name: bpegm.fixed_point_residual(b, self.state) for b in self.blocks}


class CaolProblem:
    """The two-block problem with cached patch matrices.

    The filter step works on the stacked ``(L*N) x R`` patch matrix so that
    all responses are one matrix product; see :class:`convops.PatchOperator`
    for the memory cost.
    """

    def __init__(self, ts: TrainingSet, config: CaolConfig):
        self.ts, self.cfg = ts, config
        self.P = ts.patches()
        self.P2 = self.P.P.reshape(-1, ts.R)
        self.H = exact_hessian(ts, require_pd=config.majorizer == "exact").data
        self.thr = math.sqrt(2.0 * config.alpha)
        self._cache = (None, None)

    def responses(self, D):
        # the Z step and the objective see the same D object; iterates are
        # never modified in place, so identity is a safe cache key
        if self._cache[0] is not D:
            self._cache = (D, self.P2 @ D)
        return self._cache[1]

    def codes(self, D):
        return hard_threshold(self.responses(D), self.thr)

    def objective(self, xs) -> float:
        D, Z = xs["D"], xs["Z"]
        r = (self.responses(D) - Z).ravel()
        F = 0.5 * float(r @ r) + self.cfg.alpha * float(np.count_nonzero(Z))
        if self.cfg.model == DIVERSITY:
            F += 0.5 * self.cfg.beta * g_div(D)
        return F

    def grad_D(self, xs):
        return self.H @ xs["D"] - self.P2.T @ xs["Z"]

    def prox_D(self, point, Mt, xs):
        if self.cfg.model == ORTHOGONAL:
            return prox_orthogonal(point, Mt)
        return prox_diversity_sequential(point, Mt, self.cfg.beta, xs["D"])

    def blocks(self, M: Majorizer) -> list:
        cfg = self.cfg
        return [
            bpegm.Block("D", grad=self.grad_D, prox=self.prox_D, majorizer=M,
                        lam=cfg.lambda_D),
            bpegm.Block("Z", minimize=lambda xs: self.codes(xs["D"])),
        ]

    def unflatten_codes(self, Z):
        L = self.ts.L
        H, W = self.ts.image_shape
        return np.moveaxis(Z.reshape(L, H, W, -1), -1, 1)


def learn(ts: TrainingSet, config: CaolConfig | None = None,
          D0: FilterBank | None = None, callback=None) -> CaolResult:
    """Train a filter bank by reBPEG-M.

    Parameters
    ----------
    ts : TrainingSet
    config : CaolConfig
    D0 : FilterBank, optional
        Initial filters; by default :func:`init_filters` per the config.
    callback : callable, optional
        Called as ``callback(record, state)`` after each iteration.

    Returns
    -------
    CaolResult
    """
    cfg = config or CaolConfig()
    if D0 is None:
        D0 = init_filters(ts.shape, cfg.K or ts.R, cfg.init, cfg.seed)
    if D0.shape != ts.shape:
        raise DimensionError("initial filter shape does not match the training set")
    if cfg.model == ORTHOGONAL and D0.R > D0.K:
        raise UnsupportedShapeError("the orthogonal model needs R <= K")
    if cfg.model == DIVERSITY:
        # the unit-energy constraint must hold from the start
        D0 = FilterBank(D0.D / (np.linalg.norm(D0.D, axis=0) * math.sqrt(D0.R)),
                        D0.shape)
    prob = CaolProblem(ts, cfg)
    M = filter_majorizer(ts, cfg.majorizer)
    blocks = prob.blocks(M)
    x0 = {"D": D0.D, "Z": prob.codes(D0.D)}
    feasible0 = (cfg.model == DIVERSITY
                 or orthogonality_residual(D0.D) <= 1e-10)
    scfg = bpegm.SolverConfig(
        delta=cfg.delta, omega=cfg.omega, tol=cfg.resolved_tol,
        max_iter=cfg.max_iter, extrapolation=cfg.extrapolation,
        restart=cfg.restart, track_block_objectives=cfg.track_block_objectives,
        check_monotone=cfg.check_monotone,
        monotone_start=1 if feasible0 else 2, callback=callback)
    res = bpegm.solve(blocks, prob.objective, x0, scfg)
    bank = FilterBank(res.x["D"], ts.shape)
    diag = {
        "objective": res.records[-1].objective if res.records else prob.objective(x0),
        "iterations": len(res.records),
        "g_div": g_div(bank),
        "orthogonality_residual": orthogonality_residual(bank),
        "tf_residual": max(tf_residual(bank, x, ts.bc) for x in ts.images
                           if np.any(x)) if any(np.any(x) for x in ts.images) else 0.0,
        "nonzero_fraction": float(np.count_nonzero(res.x["Z"]) / res.x["Z"].size),
        "majorizer": cfg.majorizer,
    }
    return CaolResult(bank, prob.unflatten_codes(res.x["Z"]), res.records,
                      res.converged, diag, blocks, res.x)


def iterations_to_within(objectives, rel: float = 0.01, final: float | None = None) -> int:
    """First iteration (1-based) whose objective is within `rel` of the final value."""
    F = np.asarray(objectives, dtype=float)
    ref = F[-1] if final is None else final
    hit = np.nonzero(F - ref <= rel * abs(ref))[0]
    return int(hit[0]) + 1 if hit.size else len(F) + 1


def iterations_to_common_threshold(curves: dict, rel: float = 0.01) -> dict:
    """First iteration of each run within `rel` of the largest final objective.

    Every run attains the largest final value, so all runs are measured
    against one threshold. Counting against each run's own final value
    instead rewards runs that are still descending slowly when a budget
    cuts them off.
    """
    ref = max(float(np.asarray(c, dtype=float)[-1]) for c in curves.values())
    return {k: iterations_to_within(c, rel, final=ref) for k, c in curves.items()}
