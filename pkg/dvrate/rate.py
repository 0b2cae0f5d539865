from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.special import logsumexp

from dvrate.chain import FiniteChain, LazyChain, SubsetSpec, can_reach
from dvrate.config import RateOptions
from dvrate.const import (
    DIVERGENCE_GRAD,
    HOLDER_TOL,
    PENALTY_NOISE,
    REPAIR_TOL,
    RESIDUAL_TOL,
    WARM_STAGES,
    WITNESS_TOL,
)
from dvrate.errors import NumericalError
from dvrate.utils import as_measure

log = logging.getLogger(__package__)

_EPS = np.finfo(float).eps


@dataclass(frozen=True, eq=False)
class LogPotential:
    phi: np.ndarray
    anchor: int

    def __post_init__(self) -> None:
        phi = np.array(self.phi, dtype=float)
        if phi.ndim != 1 or not np.all(np.isfinite(phi)):
            raise ValueError("a log-potential is a finite vector")
        if phi[self.anchor] != 0.0:
            raise ValueError("phi(anchor) must be 0")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @classmethod
    def gauged(cls, phi, anchor: int) -> LogPotential:
        phi = np.asarray(phi, dtype=float)
        return cls(phi=phi - phi[anchor], anchor=anchor)

    @property
    def u(self) -> np.ndarray:
        return np.exp(self.phi)


class RateStatus(str, Enum):
    CONVERGED = "converged"
    INFINITE = "infinite"
    MAX_ITERATIONS = "max_iterations"


@dataclass(frozen=True, eq=False)
class RateResult:
    value: float
    maximizer: LogPotential | None
    status: RateStatus
    gradient_norm: float
    iterations: int = 0
    max_violation: float = 0.0
    # for INFINITE results: the divergent iterate, whose Φ is a finite lower bound
    last_iterate: LogPotential | None = None

    @property
    def is_infinite(self) -> bool:
        return self.status is RateStatus.INFINITE

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "status": self.status.value,
            "gradient_norm": self.gradient_norm,
            "iterations": self.iterations,
            "max_violation": self.max_violation,
            "maximizer": None if self.maximizer is None else self.maximizer.phi.tolist(),
        }


@dataclass(frozen=True)
class C1C2Bounds:
    c1: float
    c2: float

    def __post_init__(self) -> None:
        if not 0.0 < self.c1 <= self.c2 < math.inf:
            raise ValueError("need 0 < c1 <= c2 < inf")

    @classmethod
    def of(cls, u) -> C1C2Bounds:
        u = np.asarray(u, dtype=float)
        return cls(c1=float(u.min()), c2=float(u.max()))


def row_lse(P: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """lse_y(φ) = ln Σ_z P(y,z) e^{φ(z)} per row, max-shifted over the row support."""
    A = np.where(P > 0.0, phi[None, :], -np.inf)
    return logsumexp(A, axis=1, b=P)


def _softmax_rows(P: np.ndarray, phi: np.ndarray, lse: np.ndarray) -> np.ndarray:
    W = np.zeros_like(P)
    mask = P > 0.0
    W[mask] = (P * np.exp(phi[None, :] - lse[:, None]))[mask]
    return W


def _as_phi(phi, d: int) -> np.ndarray:
    if isinstance(phi, LogPotential):
        phi = phi.phi
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (d,):
        raise ValueError(f"phi has shape {phi.shape}, expected ({d},)")
    return phi


class _Objective:
    """Φ(φ, μ) minus the quadratic superharmonicity penalty, with derivatives."""

    def __init__(self, P: np.ndarray, mu_full: np.ndarray, constrained: np.ndarray, rho: float = 0.0):
        self.P = P
        self.rows = np.flatnonzero(mu_full > 0.0)
        self.mu = mu_full[self.rows]
        self.constrained = constrained
        self.rho = rho

    def value(self, phi: np.ndarray) -> float:
        P = self.P
        lse = row_lse(P[self.rows], phi)
        val = float(self.mu @ (phi[self.rows] - lse))
        if self.rho and self.constrained.size:
            v = np.maximum(row_lse(P[self.constrained], phi) - phi[self.constrained], 0.0)
            val -= self.rho * float(v @ v)
        return val

    def evaluate(self, phi: np.ndarray):
        P = self.P
        d = P.shape[0]
        Pm = P[self.rows]
        lse = row_lse(Pm, phi)
        W = _softmax_rows(Pm, phi, lse)
        val = float(self.mu @ (phi[self.rows] - lse))
        grad = np.zeros(d)
        grad[self.rows] += self.mu
        flow = self.mu @ W
        grad -= flow
        hess = -(np.diag(flow) - W.T @ (self.mu[:, None] * W))

        if self.rho and self.constrained.size:
            Pc = P[self.constrained]
            lse_c = row_lse(Pc, phi)
            v = lse_c - phi[self.constrained]
            active = v > 0.0
            if np.any(active):
                rows = self.constrained[active]
                va = v[active]
                Wa = _softmax_rows(Pc[active], phi, lse_c[active])
                D = Wa.copy()
                D[np.arange(rows.size), rows] -= 1.0
                val -= self.rho * float(va @ va)
                grad -= 2.0 * self.rho * (va @ D)
                hess -= 2.0 * self.rho * (
                    D.T @ D + np.diag(va @ Wa) - Wa.T @ (va[:, None] * Wa)
                )
        return val, grad, hess


def _stop_tol(obj: _Objective, phi: np.ndarray, opts: RateOptions) -> float:
    # the penalty gradient carries rounding of order rho * eps * |phi|
    return max(opts.tol_grad, PENALTY_NOISE * _EPS * obj.rho * (1.0 + float(np.abs(phi).max())))


def _maximize(obj: _Objective, phi0: np.ndarray, anchor: int, opts: RateOptions):
    """Gradient-regularized Newton ascent with Armijo backtracking.

    With a penalty the gradient test is relative to its rounding floor.
    Returns (phi, value, gradient_norm, iterations, status).
    """
    d = phi0.shape[0]
    free = np.array([i for i in range(d) if i != anchor], dtype=np.int64)
    phi = phi0 - phi0[anchor]
    val, grad, hess = obj.evaluate(phi)
    gnorm = float(np.abs(grad[free]).max()) if free.size else 0.0
    for it in range(opts.max_iter):
        tol = _stop_tol(obj, phi, opts)
        if gnorm <= tol:
            return phi, val, gnorm, it, RateStatus.CONVERGED
        if np.abs(phi).max() > opts.phi_cap and gnorm > max(DIVERGENCE_GRAD, tol):
            log.debug(f"ascent diverging: |phi|={np.abs(phi).max():.1f} grad={gnorm:.3e}")
            return phi, val, gnorm, it, RateStatus.INFINITE

        g = grad[free]
        H = -hess[np.ix_(free, free)]
        try:
            direction = np.linalg.solve(H + gnorm * np.eye(free.size), g)
        except np.linalg.LinAlgError:
            direction = g.copy()
        if not np.all(np.isfinite(direction)) or direction @ g <= 0.0:
            direction = g.copy()
        longest = np.abs(direction).max()
        if longest > opts.max_step:
            direction *= opts.max_step / longest

        slope = float(g @ direction)
        noise = 8.0 * _EPS * (1.0 + abs(val))
        t = 1.0
        while True:
            trial = phi.copy()
            trial[free] += t * direction
            trial_val = obj.value(trial)
            if trial_val >= val + opts.armijo * t * slope - noise:
                break
            t *= 0.5
            if t < 1e-16:
                log.debug(f"line search stalled at grad={gnorm:.3e}")
                # a stiff penalty stage that cannot move has hit its rounding floor
                status = RateStatus.CONVERGED if obj.rho else RateStatus.MAX_ITERATIONS
                return phi, val, gnorm, it, status
        phi = trial
        val, grad, hess = obj.evaluate(phi)
        gnorm = float(np.abs(grad[free]).max())
    status = RateStatus.CONVERGED if gnorm <= _stop_tol(obj, phi, opts) else RateStatus.MAX_ITERATIONS
    return phi, val, gnorm, opts.max_iter, status


def phi_objective(chain: FiniteChain, Y: SubsetSpec, mu, phi):
    """Φ(φ, μ) = Σ_{y∈Y} μ(y)[φ(y) − lse_y(φ)] and its gradient over all states."""
    mu = as_measure(mu, Y.size)
    phi = _as_phi(phi, chain.d)
    obj = _Objective(chain.transition, Y.embed(mu, chain.d), np.zeros(0, dtype=np.int64))
    val, grad, _ = obj.evaluate(phi)
    return val, grad


def subgradient(chain: FiniteChain, Y: SubsetSpec, phi) -> np.ndarray:
    """g(y) = φ(y) − lse_y(φ) over Y, so that Φ(φ, μ) = ⟨g, μ⟩."""
    phi = _as_phi(phi, chain.d)
    order = list(Y.order)
    return phi[order] - row_lse(chain.transition[order], phi)


def _result(phi, value, gnorm, iterations, status, anchor, violation=0.0) -> RateResult:
    potential = LogPotential.gauged(phi, anchor)
    if status is RateStatus.INFINITE:
        return RateResult(
            value=math.inf,
            maximizer=None,
            status=status,
            gradient_norm=gnorm,
            iterations=iterations,
            last_iterate=potential,
        )
    if status is RateStatus.MAX_ITERATIONS:
        log.warning(f"rate ascent stopped before convergence, grad={gnorm:.3e}")
    return RateResult(
        value=max(value, 0.0) if value > -1e-12 else value,
        maximizer=potential,
        status=status,
        gradient_norm=gnorm,
        iterations=iterations,
        max_violation=violation,
    )


def rate_compact(chain: FiniteChain, mu, opts: RateOptions | None = None, phi0=None) -> RateResult:
    """I(μ) = sup over all log-potentials of Φ(φ, μ) (Y = whole space)."""
    opts = opts or RateOptions()
    mu = as_measure(mu, chain.d)
    anchor = 0
    obj = _Objective(chain.transition, mu, np.zeros(0, dtype=np.int64))
    start = np.zeros(chain.d) if phi0 is None else _as_phi(phi0, chain.d).copy()
    phi, val, gnorm, its, status = _maximize(obj, start, anchor, opts)
    return _result(phi, val, gnorm, its, status, anchor)


def rate_constrained(chain: FiniteChain, Y: SubsetSpec, mu, opts: RateOptions | None = None, phi0=None) -> RateResult:
    """I(μ) over φ with lse_y(φ) ≤ φ(y) off Y, by a quadratic-penalty homotopy."""
    opts = opts or RateOptions()
    mu = as_measure(mu, Y.size)
    d = chain.d
    anchor = Y.order[0]
    outside = Y.complement(d)
    mu_full = Y.embed(mu, d)
    phi = np.zeros(d) if phi0 is None else _as_phi(phi0, d).copy()

    if outside.size == 0:
        obj = _Objective(chain.transition, mu_full, outside)
        phi, val, gnorm, its, status = _maximize(obj, phi, anchor, opts)
        return _result(phi, val, gnorm, its, status, anchor)

    # a warm start is already admissible; only the stiff stages are rerun
    schedule = list(opts.penalty_schedule)
    if phi0 is not None:
        schedule = schedule[-WARM_STAGES:]
    total = 0
    status = RateStatus.CONVERGED
    gnorm = 0.0
    for rho in schedule:
        obj = _Objective(chain.transition, mu_full, outside, rho=rho)
        phi, _, gnorm, its, status = _maximize(obj, phi, anchor, opts)
        total += its
        log.debug(f"penalty rho={rho:.0e}: {its} iterations, status={status.value}")
        if status is RateStatus.INFINITE:
            return _result(phi, math.inf, gnorm, total, status, anchor)

    phi = repair_superharmonic(chain, Y, phi)
    violation = float(max(0.0, (row_lse(chain.transition[outside], phi) - phi[outside]).max()))
    value = _Objective(chain.transition, mu_full, outside).value(phi)
    return _result(phi, value, gnorm, total, status, anchor, violation)


def repair_superharmonic(chain: FiniteChain, Y: SubsetSpec, phi, tol: float = REPAIR_TOL, max_sweeps: int = 100_000) -> np.ndarray:
    """Raise φ off Y until lse_y(φ) ≤ φ(y) + tol there (monotone value iteration)."""
    phi = _as_phi(phi, chain.d).copy()
    outside = Y.complement(chain.d)
    if outside.size == 0:
        return phi
    P = chain.transition[outside]
    for _ in range(max_sweeps):
        lse = row_lse(P, phi)
        if (lse - phi[outside]).max() <= tol:
            return phi
        phi[outside] = np.maximum(phi[outside], lse)
    raise NumericalError("superharmonic repair did not settle")


def superharmonic_extension(chain: FiniteChain, Y: SubsetSpec, u_on_Y, slack=0.0) -> np.ndarray:
    """Smallest u with u = given values on Y and u(y) ≥ πu(y) + slack off Y."""
    u_on_Y = np.asarray(u_on_Y, dtype=float)
    if u_on_Y.shape != (Y.size,) or np.any(u_on_Y <= 0.0):
        raise ValueError("u on Y must be a positive vector over Y")
    d = chain.d
    order = np.array(Y.order, dtype=np.int64)
    outside = Y.complement(d)
    u = np.zeros(d)
    u[order] = u_on_Y
    if outside.size == 0:
        return u
    P = chain.transition
    Q = P[np.ix_(outside, outside)]
    B = P[np.ix_(outside, order)]
    if not np.all(can_reach(Q > 0.0, B.sum(axis=1) > 0.0)):
        raise ValueError("some state outside Y never reaches Y")
    rhs = B @ u_on_Y + np.broadcast_to(np.asarray(slack, dtype=float), (outside.size,))
    M = np.eye(outside.size) - Q
    uZ = lu_solve(lu_factor(M), rhs)
    if float(np.abs(M @ uZ - rhs).max()) > RESIDUAL_TOL * max(1.0, float(np.abs(rhs).max())):
        raise NumericalError("superharmonic extension solve is inaccurate")
    u[outside] = uZ
    return u


def superharmonic_check(chain: FiniteChain | LazyChain, Y: SubsetSpec, u, tol: float = WITNESS_TOL) -> list[tuple[int, float]]:
    """States outside Y where πu(y) > u(y) + tol, with the deficit πu(y) − u(y).

    For a ``LazyChain`` the witness ``u`` must expose ``value(x)`` and an
    integer ``window``; beyond ``window`` plus one jump it is constant, so
    only the window and its jump margin are checked.
    """
    if isinstance(chain, LazyChain):
        return _lazy_superharmonic_check(chain, Y, u, tol)
    u = np.asarray(u, dtype=float)
    if u.shape != (chain.d,):
        raise ValueError(f"u has shape {u.shape}, expected ({chain.d},)")
    if not np.all(np.isfinite(u)) or np.any(u <= 0.0):
        raise ValueError("u must be finite and strictly positive")
    outside = Y.complement(chain.d)
    deficit = chain.transition[outside] @ u - u[outside]
    return [(int(y), float(v)) for y, v in zip(outside, deficit, strict=True) if v > tol]


def _lazy_superharmonic_check(chain: LazyChain, Y: SubsetSpec, witness, tol: float):
    lo, hi = witness.window
    first = lo - chain.jump_bound
    if chain.lower is not None:
        first = max(first, chain.lower)
    violations = []
    for y in range(first, hi + chain.jump_bound + 1):
        if y in Y.Y:
            continue
        uy = witness.value(y)
        if uy <= 0.0:
            raise ValueError(f"witness is not positive at {y}")
        pu = math.fsum(p * witness.value(z) for z, p in chain.transitions(y))
        if pu - uy > tol:
            violations.append((y, pu - uy))
    return violations


def holder_closure_check(chain: FiniteChain, Y: SubsetSpec, u, v, alpha: float) -> bool:
    """True iff u^α v^(1−α) is superharmonic off Y (to 1e-10)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    for name, w in (("u", u), ("v", v)):
        if superharmonic_check(chain, Y, w):
            raise ValueError(f"{name} is not superharmonic outside Y")
    w = np.asarray(u, dtype=float) ** alpha * np.asarray(v, dtype=float) ** (1.0 - alpha)
    return not superharmonic_check(chain, Y, w, tol=HOLDER_TOL)


def kernel_form_rate(chain: FiniteChain, mu, max_iter: int = 100_000, tol: float = 1e-13) -> float:
    """inf over q with μq = μ of Σ μ(x) KL(q(x,·) ‖ P(x,·)).

    The flow F = μ(x)q(x,y) is the relative-entropy projection of
    K = μ(x)P(x,y) onto the plan set with both marginals μ; alternating
    row/column scalings converge to it. Returns inf when no such plan exists.
    """
    mu = as_measure(mu, chain.d)
    support = np.flatnonzero(mu > 0.0)
    m = mu[support]
    K = m[:, None] * chain.transition[np.ix_(support, support)]
    if np.any(K.sum(axis=1) <= 0.0) or np.any(K.sum(axis=0) <= 0.0):
        return math.inf
    F = K.copy()
    for _ in range(max_iter):
        F *= (m / F.sum(axis=1))[:, None]
        col = F.sum(axis=0)
        F *= (m / col)[None, :]
        err = float(np.abs(F.sum(axis=1) - m).max())
        if err <= tol:
            break
    else:
        log.debug(f"kernel-form scaling left marginal error {err:.3e}")
        if err > 1e-9:
            return math.inf
    mask = F > 0.0
    return float(np.sum(F[mask] * np.log(F[mask] / K[mask])))
