"""Block proximal extrapolated gradient method with majorizers (BPEG-M).

Each block ``b`` is updated cyclically by

    x_acc = x_b + E_b (x_b - x_b_prev)
    x_b   = prox_b^{Mt}(x_acc - Mt^{-1} grad_b f(x_acc)),   Mt = lam_b * M_b

with the increasing momentum schedule and the gradient-mapping restart: if
the restart test fires, the step is recomputed from ``x_acc = x_b`` and the
block's momentum is reset.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (DivergenceError, InvalidParameterError, MonotonicityError,
                     UnsupportedCombinationError)
from .majorizers import DENSE, DIAGONAL, SCALED_IDENTITY, Majorizer

DEFAULT_LAMBDA = 1.0 + 1e-10


def next_theta(theta: float) -> float:
    return 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))


def momentum_coefficient(theta: float) -> tuple[float, float]:
    """Return ``(e, theta_next)`` for the increasing momentum schedule."""
    if theta < 1:
        raise InvalidParameterError("momentum theta must be >= 1")
    theta_next = next_theta(theta)
    return (theta - 1.0) / theta_next, theta_next


def extrapolation_scale(e: float, lam: float, delta: float) -> float:
    return e * delta * (lam - 1.0) / (2.0 * (lam + 1.0))


@dataclass
class Extrapolation:
    """The extrapolation matrix ``E``: a scalar or a per-entry diagonal."""

    scale: object

    def apply(self, v):
        s = self.scale
        if np.ndim(s) == 0:
            return s * v
        v = np.asarray(v)
        if v.shape[0] == s.size:
            return s.reshape((-1,) + (1,) * (v.ndim - 1)) * v
        return (s * v.ravel()).reshape(v.shape)

    @property
    def is_zero(self) -> bool:
        return bool(np.all(np.asarray(self.scale) == 0))


def extrapolation_matrix(e: float, lam: float, delta: float,
                         M_prev: Majorizer, M_curr: Majorizer,
                         check: bool = True) -> Extrapolation:
    """``E = e delta (lam-1) / (2 (lam+1)) * M_curr^{-1/2} M_prev^{1/2}``.

    When the majorizer did not change only the scalar is formed. Varying
    dense majorizers would need matrix square roots and are rejected.
    """
    s = extrapolation_scale(e, lam, delta)
    if s == 0 or M_prev is M_curr or M_prev.equals(M_curr):
        E = Extrapolation(s)
    elif M_prev.form == DENSE or M_curr.form == DENSE:
        raise UnsupportedCombinationError(
            "extrapolation with a varying dense majorizer is not supported")
    elif M_prev.form == SCALED_IDENTITY and M_curr.form == SCALED_IDENTITY:
        E = Extrapolation(s * math.sqrt(M_prev.data / M_curr.data))
    else:
        pd, cd = M_prev.diagonal(), M_curr.diagonal()
        E = Extrapolation(s * np.sqrt(pd / cd))
    if check and not E.is_zero:
        check_assumption3(E, lam, delta, M_prev, M_curr)
    return E


def check_assumption3(E: Extrapolation, lam, delta, M_prev, M_curr,
                      rtol: float = 1e-12) -> None:
    """Assert ``E^T M_curr E <= delta^2 (lam-1)^2 / (4 (lam+1)^2) M_prev``."""
    bound = delta ** 2 * (lam - 1.0) ** 2 / (4.0 * (lam + 1.0) ** 2)
    if M_curr.form == DENSE and np.ndim(E.scale) == 0:
        # constant dense majorizer: E = s I
        lhs = E.scale ** 2 * M_curr.data
        gap = float(np.linalg.eigvalsh(bound * M_prev.data - lhs)[0])
        ok = gap >= -rtol * max(1.0, bound * float(np.trace(M_prev.data)))
    else:
        lhs = np.asarray(E.scale) ** 2 * M_curr.diagonal()
        rhs = bound * M_prev.diagonal()
        ok = bool(np.all(lhs <= rhs * (1 + rtol) + 1e-300))
    if not ok:
        raise InvalidParameterError("extrapolation matrix violates the "
                                    "required majorizer bound")


def restart_check(M: Majorizer, x_acc, x_new, x_old, omega: float = 0.0) -> bool:
    """Gradient-mapping restart test ``cos(M (x_acc - x_new), x_new - x_old) > omega``."""
    u = M.matvec(np.asarray(x_acc, dtype=float) - x_new)
    v = np.asarray(x_new, dtype=float) - x_old
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return False
    return float(np.vdot(u, v)) / (nu * nv) > omega


@dataclass
class Block:
    """One variable block.

    Parameters
    ----------
    name : str
    grad : callable
        ``grad(xs)`` returns the gradient of the smooth part with respect to
        this block, where ``xs`` maps block names to points. The engine puts
        the extrapolated point in ``xs[name]``.
    prox : callable
        ``prox(point, Mtilde, xs)`` returns the ``Mtilde``-weighted proximal
        point of the block's nonsmooth term (or projection).
    majorizer : Majorizer or callable
        Fixed majorizer, or ``majorizer(xs)`` recomputed at every update.
    lam : float
        Majorizer inflation, ``> 1``.
    extrapolate : bool
        Whether this block uses momentum.
    minimize : callable, optional
        ``minimize(xs)`` returns the exact block minimizer. When given it
        replaces the prox-gradient step (the limit ``lam -> 1`` with ``E = 0``
        for a sharp majorizer).
    """

    name: str
    grad: Optional[Callable] = None
    prox: Optional[Callable] = None
    majorizer: object = None
    lam: float = DEFAULT_LAMBDA
    extrapolate: bool = True
    minimize: Optional[Callable] = None

    def __post_init__(self):
        if self.minimize is None:
            if self.grad is None or self.prox is None or self.majorizer is None:
                raise InvalidParameterError(
                    f"block {self.name!r} needs grad, prox and majorizer")
            if not self.lam > 1:
                raise InvalidParameterError(f"block {self.name!r}: lambda must be > 1")

    def majorizer_at(self, xs) -> Majorizer:
        return self.majorizer(xs) if callable(self.majorizer) else self.majorizer


@dataclass
class SolverConfig:
    delta: float = 0.99
    omega: float = 0.0
    tol: float = 1e-5
    max_iter: int = 20000
    extrapolation: bool = True
    restart: bool = True
    track_block_objectives: bool = False
    check_monotone: bool = True
    monotone_slack: float = 1e-12
    monotone_start: int = 1
    callback: Optional[Callable] = None

    def __post_init__(self):
        if not 0 <= self.delta < 1:
            raise InvalidParameterError("delta must lie in [0, 1)")
        if not -1 <= self.omega <= 0:
            raise InvalidParameterError("omega must lie in [-1, 0]")
        if not self.tol > 0:
            raise InvalidParameterError("tol must be positive")
        if self.max_iter < 0:
            raise InvalidParameterError("max_iter must be nonnegative")


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    step_norms: list
    restart_flags: list
    elapsed: float
    block_objectives: list = field(default_factory=list)


@dataclass
class SolverState:
    x: dict
    x_prev: dict
    M_prev: dict
    theta: dict
    iteration: int = 0


@dataclass
class SolveResult:
    x: dict
    records: list
    converged: bool
    state: SolverState

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceError(f"non-finite values in block {name!r}")


def _prox_grad(block: Block, xs: dict, x_acc, Mt: Majorizer):
    trial = dict(xs)
    trial[block.name] = x_acc
    g = np.asarray(block.grad(trial), dtype=float)
    _check_finite(block.name, g)
    new = block.prox(x_acc - Mt.solve(g), Mt, xs)
    _check_finite(block.name, new)
    return np.asarray(new, dtype=float)


def block_step(block: Block, state: SolverState, config: SolverConfig):
    """One update of `block`; returns ``(x_new, restarted, M)``."""
    name = block.name
    xs = state.x
    x, xp = xs[name], state.x_prev[name]
    if block.minimize is not None:
        new = np.asarray(block.minimize(xs), dtype=float)
        _check_finite(name, new)
        return new, False, None
    M = block.majorizer_at(xs)
    Mt = M.scale(block.lam)
    use_mom = config.extrapolation and block.extrapolate
    e = 0.0
    if use_mom:
        e, state.theta[name] = momentum_coefficient(state.theta[name])
    E = (extrapolation_matrix(e, block.lam, config.delta,
                              state.M_prev.get(name, M), M)
         if e > 0 else Extrapolation(0.0))
    x_acc = x if E.is_zero else x + E.apply(x - xp)
    new = _prox_grad(block, xs, x_acc, Mt)
    restarted = False
    if not E.is_zero and config.restart and restart_check(M, x_acc, new, x, config.omega):
        new = _prox_grad(block, xs, x, Mt)
        state.theta[name] = 1.0
        restarted = True
    return new, restarted, M


def initial_state(blocks, x0: dict) -> SolverState:
    x = {b.name: np.array(x0[b.name], dtype=float) for b in blocks}
    return SolverState(x=x, x_prev={k: v.copy() for k, v in x.items()},
                       M_prev={}, theta={b.name: 1.0 for b in blocks})


def solve(blocks, objective: Callable, x0, config: SolverConfig | None = None,
          state: SolverState | None = None) -> SolveResult:
    """Run cyclic reBPEG-M over `blocks` until the relative change drops below tol.

    Parameters
    ----------
    blocks : list of Block
    objective : callable
        ``objective(xs)`` returns the full cost.
    x0 : dict
        Initial point per block name (``x^{(-1)} = x^{(0)}``).
    config : SolverConfig
    state : SolverState, optional
        Resume from an earlier state instead of `x0`.

    Returns
    -------
    SolveResult
        Final iterates, one :class:`IterationRecord` per iteration, and
        whether the stopping rule fired.
    """
    config = config or SolverConfig()
    names = [b.name for b in blocks]
    if len(set(names)) != len(names):
        raise InvalidParameterError("block names must be unique")
    state = state or initial_state(blocks, x0)
    monotone = config.check_monotone and not (
        config.extrapolation and any(b.extrapolate and b.minimize is None
                                     for b in blocks))
    records = []
    converged = False
    t0 = time.perf_counter()
    F_old = float(objective(state.x)) if config.max_iter else None
    for it in range(config.max_iter):
        steps, flags, block_objs = [], [], []
        rel = 0.0
        F_blk = F_old
        for block in blocks:
            name = block.name
            x_old = state.x[name]
            new, restarted, M = block_step(block, state, config)
            state.x_prev[name] = x_old
            state.x[name] = new
            if M is not None:
                state.M_prev[name] = M
            step = float(np.linalg.norm(new - x_old))
            steps.append(step)
            flags.append(restarted)
            rel = max(rel, step / (float(np.linalg.norm(x_old)) + 1e-30))
            if config.track_block_objectives:
                F_new = float(objective(state.x))
                block_objs.append(F_new)
                if monotone and it + 1 >= config.monotone_start:
                    _check_descent(F_blk, F_new, config, it, name)
                F_blk = F_new
        F = block_objs[-1] if block_objs else float(objective(state.x))
        if not np.isfinite(F):
            raise DivergenceError(f"objective became non-finite at iteration {it}")
        if monotone and not config.track_block_objectives \
                and it + 1 >= config.monotone_start:
            _check_descent(F_old, F, config, it, None)
        F_old = F
        state.iteration += 1
        rec = IterationRecord(it + 1, F, steps, flags,
                              time.perf_counter() - t0, block_objs)
        records.append(rec)
        if config.callback is not None:
            config.callback(rec, state)
        if rel <= config.tol:
            converged = True
            break
    return SolveResult(state.x, records, converged, state)


def _check_descent(F_old, F_new, config, it, name):
    slack = config.monotone_slack * abs(F_old)
    if F_new > F_old + slack:
        where = f" after block {name!r}" if name else ""
        raise MonotonicityError(
            f"objective increased by {F_new - F_old:.3e}{where} at iteration "
            f"{it + 1} with extrapolation disabled", it + 1, F_new - F_old)


def fixed_point_residual(block: Block, xs: dict) -> float:
    """``||x_b - T_b(x_b)|| / ||x_b||`` where ``T_b`` is the non-extrapolated update."""
    x = xs[block.name]
    if block.minimize is not None:
        new = block.minimize(xs)
    else:
        Mt = block.majorizer_at(xs).scale(block.lam)
        new = _prox_grad(block, xs, x, Mt)
    return float(np.linalg.norm(x - new) / (np.linalg.norm(x) + 1e-30))


def write_convergence_csv(path, records, block_names) -> None:
    """CSV with iter, objective, one step-norm column per block, restarts, ms."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "objective"] + [f"step_norm_{n}" for n in block_names]
                   + ["restart_flags", "elapsed_ms"])
        for r in records:
            flags = "".join("1" if f else "0" for f in r.restart_flags)
            w.writerow([r.iteration, repr(r.objective)]
                       + [repr(s) for s in r.step_norms]
                       + [flags, f"{1e3 * r.elapsed:.3f}"])
