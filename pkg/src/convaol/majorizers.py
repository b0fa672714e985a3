"""Majorization matrices for the filter Hessian and weighted normal matrices.

The smooth part of the filter update has the constant Hessian
``H = sum_l Psi_l^T Psi_l`` (R x R), where ``Psi_l d = conv_same(d, x_l)``.
Any symmetric ``M`` with ``M - H`` positive semidefinite gives a quadratic
upper bound of that term and can drive a majorized gradient step.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .convops import CIRCULAR, PatchOperator, as_image, check_bc
from .errors import (DimensionError, FormatError, InputError, InvalidWeightsError,
                     NotPositiveDefiniteError, UnsupportedBoundaryError)

DENSE = "dense"
DIAGONAL = "diagonal"
SCALED_IDENTITY = "scaled_identity"
FORMS = (DENSE, DIAGONAL, SCALED_IDENTITY)

MAJORIZER_MAGIC = b"CAOLMJ00"
_FORM_TAG = {DENSE: 0, DIAGONAL: 1, SCALED_IDENTITY: 2}
_TAG_FORM = {v: k for k, v in _FORM_TAG.items()}


@dataclass
class Majorizer:
    """A positive definite matrix stored as dense, diagonal or ``c * I``.

    Parameters
    ----------
    form : {"dense", "diagonal", "scaled_identity"}
    data : ndarray or float
        The ``n x n`` matrix, the length-``n`` diagonal, or the scalar ``c``.
    n : int, optional
        Dimension; required for the scaled identity form.
    semidefinite : bool
        Allow zero eigenvalues (zero diagonal entries). Used for operators like
        a masked forward model where some pixels are never observed.
    """

    form: str
    data: object
    n: int | None = None
    semidefinite: bool = False
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.form not in FORMS:
            raise InputError(f"unknown majorizer form {self.form!r}")
        if self.form == DENSE:
            A = np.array(self.data, dtype=float)
            if A.ndim != 2 or A.shape[0] != A.shape[1]:
                raise DimensionError("dense majorizer must be square")
            scale = max(1.0, float(np.max(np.abs(A))))
            if np.max(np.abs(A - A.T)) > 1e-12 * scale:
                raise InputError("dense majorizer is not symmetric")
            self.data = 0.5 * (A + A.T)
            self.n = A.shape[0]
        elif self.form == DIAGONAL:
            d = np.array(self.data, dtype=float).ravel()
            if np.any(~np.isfinite(d)) or np.any(d < 0) or (
                    not self.semidefinite and np.any(d <= 0)):
                bad = float(d.min()) if d.size else 0.0
                raise NotPositiveDefiniteError(
                    f"diagonal majorizer has a nonpositive entry (min {bad:g})", bad)
            self.data = d
            self.n = d.size
        else:
            c = float(self.data)
            if not np.isfinite(c) or c < 0 or (not self.semidefinite and c <= 0):
                raise NotPositiveDefiniteError(
                    f"scaled identity majorizer needs c > 0, got {c:g}", c)
            if self.n is None:
                raise InputError("scaled identity majorizer needs its dimension")
            self.data = c
            self.n = int(self.n)

    # -- algebra -----------------------------------------------------------
    def _apply(self, v, fn):
        v = np.asarray(v, dtype=float)
        if v.ndim >= 1 and v.shape[0] == self.n:
            return fn(v)
        if v.size == self.n:
            return fn(v.ravel()).reshape(v.shape)
        raise DimensionError(f"vector of shape {v.shape} does not match "
                             f"majorizer dimension {self.n}")

    def _diag_col(self, d, v):
        return d.reshape((-1,) + (1,) * (v.ndim - 1)) * v

    def matvec(self, v):
        """``M @ v``; `v` may be a vector, column stack, or flattened image."""
        if self.form == DENSE:
            return self._apply(v, lambda u: self.data @ u)
        if self.form == DIAGONAL:
            return self._apply(v, lambda u: self._diag_col(self.data, u))
        return self._apply(v, lambda u: self.data * u)

    def solve(self, v):
        """``M^{-1} @ v``."""
        if self.form == DENSE:
            return self._apply(v, lambda u: np.linalg.solve(self.data, u))
        if self.form == DIAGONAL:
            return self._apply(v, lambda u: self._diag_col(1.0 / self.data, u))
        return self._apply(v, lambda u: u / self.data)

    def scale(self, lam: float) -> "Majorizer":
        return Majorizer(self.form, lam * np.asarray(self.data), self.n,
                         self.semidefinite)

    def to_dense(self) -> np.ndarray:
        if self.form == DENSE:
            return self.data.copy()
        if self.form == DIAGONAL:
            return np.diag(self.data)
        return self.data * np.eye(self.n)

    def diagonal(self) -> np.ndarray:
        if self.form == DENSE:
            return np.diag(self.data).copy()
        if self.form == DIAGONAL:
            return self.data.copy()
        return np.full(self.n, self.data)

    def min_eig(self) -> float:
        if self.form == DENSE:
            return float(np.linalg.eigvalsh(self.data)[0])
        return float(np.min(self.diagonal()))

    def quad(self, v) -> float:
        """``v^T M v`` summed over columns."""
        v = np.asarray(v, dtype=float)
        return float(np.vdot(v, self.matvec(v)))

    def equals(self, other: "Majorizer") -> bool:
        return (self.form == other.form and self.n == other.n
                and np.array_equal(np.asarray(self.data), np.asarray(other.data)))

    # -- serialization -------------------------------------------------------
    def to_bytes(self) -> bytes:
        head = MAJORIZER_MAGIC + struct.pack("<II", _FORM_TAG[self.form], self.n)
        payload = np.atleast_1d(np.asarray(self.data, dtype="<f8")).tobytes()
        return head + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Majorizer":
        if data[:8] != MAJORIZER_MAGIC or len(data) < 16:
            raise FormatError("not a majorizer record (bad magic)")
        tag, n = struct.unpack("<II", data[8:16])
        if tag not in _TAG_FORM:
            raise FormatError(f"unknown majorizer form tag {tag}")
        form = _TAG_FORM[tag]
        count = {DENSE: n * n, DIAGONAL: n, SCALED_IDENTITY: 1}[form]
        if len(data) != 16 + 8 * count:
            raise FormatError("majorizer payload has the wrong length")
        vals = np.frombuffer(data, dtype="<f8", offset=16).astype(float)
        if form == DENSE:
            return cls(form, vals.reshape(n, n))
        if form == DIAGONAL:
            return cls(form, vals, semidefinite=bool(np.any(vals == 0)))
        return cls(form, vals[0], n)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Majorizer":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass
class TrainingSet:
    """Training images together with the filter shape and boundary condition."""

    images: list
    shape: tuple
    bc: str = CIRCULAR

    def __post_init__(self):
        self.images = [as_image(x) for x in self.images]
        if not self.images:
            raise InputError("training set needs at least one image")
        s0 = self.images[0].shape
        if any(x.shape != s0 for x in self.images):
            raise DimensionError("training images must share one size")
        self.shape = (int(self.shape[0]), int(self.shape[1]))
        if self.shape[0] > s0[0] or self.shape[1] > s0[1]:
            raise DimensionError(f"filter {self.shape} larger than images {s0}")
        check_bc(self.bc)

    @property
    def L(self) -> int:
        return len(self.images)

    @property
    def R(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def image_shape(self) -> tuple:
        return self.images[0].shape

    def patches(self, l: int | None = None) -> PatchOperator:
        imgs = self.images if l is None else [self.images[l]]
        return PatchOperator(imgs, self.shape, self.bc)


def _check_pd_dense(H: np.ndarray, what: str) -> float:
    lam_min = float(np.linalg.eigvalsh(H)[0])
    tr = float(np.trace(H))
    if not lam_min > 1e-10 * max(tr, 0.0) or tr <= 0:
        raise NotPositiveDefiniteError(
            f"{what} is not positive definite: smallest eigenvalue {lam_min:.3e}, "
            f"trace {tr:.3e}", lam_min)
    return lam_min


def exact_hessian(ts: TrainingSet, require_pd: bool = True) -> Majorizer:
    """The exact filter Hessian ``sum_l Psi_l^T Psi_l`` (cost O(L R^2 N)).

    With ``require_pd=False`` a singular Hessian is returned as a
    semidefinite record instead of raising.
    """
    R = ts.R
    H = np.zeros((R, R))
    for l in range(ts.L):
        P = ts.patches(l).P[0]
        H += P.T @ P
    H = 0.5 * (H + H.T)
    if require_pd:
        _check_pd_dense(H, "exact Hessian")
        return Majorizer(DENSE, H)
    M = Majorizer.__new__(Majorizer)
    M.form, M.data, M.n, M.semidefinite, M.flags = DENSE, H, R, True, {}
    return M


def diag_majorizer(ts: TrainingSet) -> Majorizer:
    """Diagonal majorizer ``diag(sum_l |Psi_l|^T |Psi_l| 1)`` (cost O(L R N))."""
    d = np.zeros(ts.R)
    for l in range(ts.L):
        A = np.abs(ts.patches(l).P[0])
        d += A.T @ A.sum(axis=1)
    if np.any(d <= 0):
        raise NotPositiveDefiniteError(
            "diagonal majorizer has a zero entry (degenerate training data)",
            float(d.min()))
    return Majorizer(DIAGONAL, d)


def circular_autocorrelation(ts: TrainingSet) -> np.ndarray:
    """``rho[s] = sum_l sum_n x_l[n] x_l[n + s]`` with circular wrap.

    Returned on the lag grid ``(-(rh-1)..rh-1) x (-(rw-1)..rw-1)``, so entry
    ``[rh - 1 + a, rw - 1 + b]`` holds lag ``(a, b)``.
    """
    rh, rw = ts.shape
    rho = np.zeros((2 * rh - 1, 2 * rw - 1))
    for x in ts.images:
        for a in range(-(rh - 1), rh):
            for b in range(-(rw - 1), rw):
                shifted = np.roll(x, (-a, -b), axis=(0, 1))
                rho[rh - 1 + a, rw - 1 + b] += float(np.vdot(x, shifted))
    return rho


def _circulant_pd(first_row: np.ndarray) -> bool:
    """Whether ``circ(first_row)`` is positive definite.

    A circulant is normal, so it is PD iff the real parts of its eigenvalues,
    the DFT of its first row, are all positive.
    """
    return bool(np.min(np.real(np.fft.fft(np.ravel(first_row)))) > 0)


def scaled_identity_majorizer(ts: TrainingSet, rule: str = "row_sum") -> Majorizer:
    """Scaled identity majorizer ``c * I`` for circular boundaries.

    Under circular boundaries the Hessian entries are lags of the summed
    circular autocorrelation, ``H[r, r'] = rho(offset_r - offset_r')``.

    Parameters
    ----------
    rule : {"row_sum", "first_row"}
        ``"row_sum"`` (default) takes ``c`` as the largest absolute row sum of
        the Hessian, which bounds its spectral radius, so ``c I`` always
        dominates. ``"first_row"`` uses the absolute sum of the first row
        only; it is a circulant heuristic that can fail to dominate on 2D
        data. If the circulant built from that row is not PD this rule warns
        and falls back to :func:`diag_majorizer`.
    """
    if ts.bc != CIRCULAR:
        raise UnsupportedBoundaryError(
            "the scaled identity majorizer requires circular boundaries")
    rho = np.abs(circular_autocorrelation(ts))
    rh, rw = ts.shape
    if rule == "row_sum":
        # row (i, j) sums |rho| over lags (i - i', j - j'): a box sum of |rho|
        best = 0.0
        for i in range(rh):
            for j in range(rw):
                box = rho[rh - 1 + i - (rh - 1):rh - 1 + i + 1,
                          rw - 1 + j - (rw - 1):rw - 1 + j + 1]
                best = max(best, float(box.sum()))
        c = best
    elif rule == "first_row":
        first = rho[rh - 1:, rw - 1:]
        c = float(first.sum())
        signed = circular_autocorrelation(ts)[rh - 1:, rw - 1:]
        if not _circulant_pd(signed):
            warnings.warn("circulant approximant is not positive definite; "
                          "falling back to the diagonal majorizer")
            M = diag_majorizer(ts)
            M.flags["circulant_not_pd"] = True
            return M
    else:
        raise InputError(f"unknown scaled identity rule {rule!r}")
    if c <= 0:
        raise NotPositiveDefiniteError("scaled identity constant is zero", c)
    return Majorizer(SCALED_IDENTITY, c, ts.R)


def lipschitz_majorizer(ts: TrainingSet) -> Majorizer:
    """``lambda_max(H) * I``: the Lipschitz constant used by plain BPG."""
    H = exact_hessian(ts, require_pd=False).data
    c = float(np.linalg.eigvalsh(H)[-1])
    return Majorizer(SCALED_IDENTITY, c, ts.R)


def filter_majorizer(ts: TrainingSet, kind: str) -> Majorizer:
    """Dispatch by name: exact, diagonal, scaled_identity or lipschitz."""
    if kind == "exact":
        return exact_hessian(ts)
    if kind == "diagonal":
        return diag_majorizer(ts)
    if kind == "scaled_identity":
        return scaled_identity_majorizer(ts)
    if kind == "lipschitz":
        return lipschitz_majorizer(ts)
    raise InputError(f"unknown majorizer kind {kind!r}")


class _DenseOperator:
    def __init__(self, A):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.absA = np.abs(self.A)

    def abs_apply(self, x):
        return self.absA @ x

    def abs_adjoint(self, r):
        return self.absA.T @ r


def diag_weighted_normal(A, W=None) -> Majorizer:
    """Diagonal majorizer ``diag(|A|^T W |A| 1)`` of ``A^T W A``.

    Parameters
    ----------
    A : ndarray or operator
        A dense matrix, or any object with ``abs_apply`` / ``abs_adjoint``
        (entrywise-absolute forward and adjoint products) and an ``n``
        attribute.
    W : array_like, optional
        Nonnegative diagonal weights (default all ones).
    """
    op = A if hasattr(A, "abs_apply") else _DenseOperator(A)
    n = op.A.shape[1] if isinstance(op, _DenseOperator) else op.n
    ones = np.ones(n)
    r = op.abs_apply(ones)
    w = np.ones_like(r) if W is None else np.asarray(W, dtype=float).ravel()
    if w.shape != r.shape:
        raise DimensionError("weights do not match the measurement count")
    if np.any(w < 0) or np.any(~np.isfinite(w)):
        raise InvalidWeightsError("weights must be finite and nonnegative")
    d = op.abs_adjoint(w * r)
    return Majorizer(DIAGONAL, d, semidefinite=bool(np.any(d == 0)))


def diag_hermitian(A) -> Majorizer:
    """Diagonal majorizer ``diag(|A| 1)`` of a symmetric PSD matrix ``A``."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError("expected a square matrix")
    scale = max(1.0, float(np.max(np.abs(A))))
    if np.max(np.abs(A - A.T)) > 1e-12 * scale:
        raise InputError("matrix is not symmetric")
    lam_min = float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])
    if lam_min < -1e-10 * max(1.0, abs(float(np.trace(A)))):
        raise InputError(f"matrix is not PSD (smallest eigenvalue {lam_min:.3e})")
    d = np.abs(A).sum(axis=1)
    return Majorizer(DIAGONAL, d, semidefinite=bool(np.any(d == 0)))


def dominance_check(M1: Majorizer, M2: Majorizer) -> float:
    """Smallest eigenvalue of ``M2 - M1``; nonnegative means M2 dominates."""
    if M1.n != M2.n:
        raise DimensionError(f"dimension mismatch {M1.n} vs {M2.n}")
    if M1.form != DENSE and M2.form != DENSE:
        return float(np.min(M2.diagonal() - M1.diagonal()))
    return float(np.linalg.eigvalsh(M2.to_dense() - M1.to_dense())[0])
