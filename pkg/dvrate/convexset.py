from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations, islice

import numpy as np

from dvrate.chain import FiniteChain, SubsetSpec
from dvrate.config import RateOptions
from dvrate.const import (
    FW_STEP_OPEN_LOOP,
    LP_MAX_DIM,
    LP_TOL,
    MEMBER_TOL,
    MODE_COMPACT,
    MODE_CONSTRAINED,
)
from dvrate.errors import EmptyConvexSetError, SizeGuardError
from dvrate.rate import (
    LogPotential,
    RateResult,
    RateStatus,
    rate_compact,
    rate_constrained,
    repair_superharmonic,
    row_lse,
    subgradient,
)

log = logging.getLogger(__package__)

_CHUNK = 20_000
_TIE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Polytope:
    """{μ in the simplex over Y : A μ ≤ b}."""

    dim: int
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be at least 1")
        A = np.array(self.A, dtype=float).reshape(-1, self.dim)
        b = np.array(self.b, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise ValueError("A and b have different numbers of rows")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("half-spaces must be finite")
        if A.shape[0] and np.any(np.all(A == 0.0, axis=1)):
            raise ValueError("a half-space normal is all zero")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def from_halfspaces(cls, dim: int, halfspaces) -> Polytope:
        halfspaces = list(halfspaces)
        A = np.array([a for a, _ in halfspaces], dtype=float).reshape(-1, dim)
        b = np.array([bb for _, bb in halfspaces], dtype=float)
        return cls(dim=dim, A=A, b=b)

    @classmethod
    def simplex(cls, dim: int) -> Polytope:
        return cls(dim=dim, A=np.zeros((0, dim)), b=np.zeros(0))

    @classmethod
    def from_spec(cls, spec: dict, dim: int) -> Polytope:
        spec = dict(spec)
        if "ball_linf" in spec:
            ball = dict(spec.pop("ball_linf"))
            if spec:
                raise ValueError(f"unknown convex set keys: {sorted(spec)}")
            center = ball.pop("center")
            radius = ball.pop("radius")
            if ball:
                raise ValueError(f"unknown ball_linf keys: {sorted(ball)}")
            C = ball_linf(center, radius)
            if C.dim != dim:
                raise ValueError(f"ball center has length {C.dim}, expected {dim}")
            return C
        halfspaces = spec.pop("halfspaces", [])
        if spec:
            raise ValueError(f"unknown convex set keys: {sorted(spec)}")
        rows = []
        for h in halfspaces:
            h = dict(h)
            a, bb = h.pop("a"), h.pop("b")
            if h:
                raise ValueError(f"unknown half-space keys: {sorted(h)}")
            if len(a) != dim:
                raise ValueError(f"half-space normal has length {len(a)}, expected {dim}")
            rows.append((a, float(bb)))
        return cls.from_halfspaces(dim, rows)

    def to_spec(self) -> dict:
        return {"halfspaces": [{"a": a.tolist(), "b": float(b)} for a, b in self.halfspaces]}

    @property
    def halfspaces(self) -> list[tuple[np.ndarray, float]]:
        return [(self.A[i], float(self.b[i])) for i in range(self.b.shape[0])]

    def member(self, mu, tol: float = MEMBER_TOL) -> bool:
        return member(self, mu, tol)

    @cached_property
    def vertices(self) -> np.ndarray:
        """Vertices of the polytope, lexicographically sorted; shape (k, dim)."""
        if self.dim > LP_MAX_DIM:
            raise SizeGuardError(f"vertex enumeration supports dim <= {LP_MAX_DIM}, got {self.dim}")
        dim = self.dim
        G = np.vstack([-np.eye(dim), self.A])
        h = np.concatenate([np.zeros(dim), self.b])
        found = []
        combos = combinations(range(G.shape[0]), dim - 1)
        while True:
            chunk = list(islice(combos, _CHUNK))
            if not chunk:
                break
            idx = np.array(chunk, dtype=np.int64).reshape(len(chunk), dim - 1)
            M = np.concatenate([G[idx], np.ones((idx.shape[0], 1, dim))], axis=1)
            rhs = np.concatenate([h[idx], np.ones((idx.shape[0], 1))], axis=1)
            s = np.linalg.svd(M, compute_uv=False)
            regular = s[:, -1] > 1e-10 * s[:, 0]
            if not np.any(regular):
                continue
            x = np.linalg.solve(M[regular], rhs[regular][..., None])[..., 0]
            feasible = np.all(x @ G.T <= h + LP_TOL, axis=1)
            if np.any(feasible):
                found.append(x[feasible])
        if not found:
            return np.zeros((0, dim))
        points = np.vstack(found)
        points[np.abs(points) < 1e-15] = 0.0
        # np.unique sorts rows lexicographically
        _, first = np.unique(np.round(points, 9), axis=0, return_index=True)
        V = points[np.sort(first)]
        V = V[np.lexsort(np.round(V, 9).T[::-1])]
        V.setflags(write=False)
        return V

    @property
    def is_empty(self) -> bool:
        return self.vertices.shape[0] == 0

    def contains(self, other: Polytope) -> bool:
        """True iff ``other`` ⊆ self (checked on the vertices of ``other``)."""
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        return all(self.member(v, tol=LP_TOL) for v in other.vertices)


def member(C: Polytope, mu, tol: float = MEMBER_TOL) -> bool:
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (C.dim,):
        raise ValueError(f"measure has shape {mu.shape}, expected ({C.dim},)")
    if np.any(mu < -tol) or abs(math.fsum(mu) - 1.0) > tol:
        return False
    return bool(np.all(C.A @ mu <= C.b + tol))


def ball_linf(center, radius: float) -> Polytope:
    center = np.asarray(center, dtype=float)
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    dim = center.shape[0]
    eye = np.eye(dim)
    A = np.vstack([eye, -eye])
    b = np.concatenate([center + radius, -(center - radius)])
    return Polytope(dim=dim, A=A, b=b)


def linear_minimize(C: Polytope, c) -> tuple[np.ndarray, float] | None:
    """argmin of c·μ over C, ties to the lexicographically smallest vertex; None if C is empty."""
    c = np.asarray(c, dtype=float)
    if c.shape != (C.dim,):
        raise ValueError(f"cost has shape {c.shape}, expected ({C.dim},)")
    V = C.vertices
    if V.shape[0] == 0:
        return None
    values = V @ c
    best = int(np.flatnonzero(values <= values.min() + _TIE_TOL)[0])
    return V[best].copy(), float(values[best])


@dataclass(frozen=True, eq=False)
class InfimumResult:
    value: float
    lower_bound: float
    gap: float
    argmin: np.ndarray | None
    certificate: LogPotential | None
    iterations: int
    status: RateStatus

    @property
    def is_infinite(self) -> bool:
        return self.status is RateStatus.INFINITE

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "lower_bound": self.lower_bound,
            "gap": self.gap,
            "argmin": None if self.argmin is None else self.argmin.tolist(),
            "iterations": self.iterations,
            "status": self.status.value,
        }


@dataclass(frozen=True)
class MinimaxReport:
    sup_inf: float
    inf_sup: float
    gap: float
    iterations: int

    def to_dict(self) -> dict:
        return {
            "sup_inf": self.sup_inf,
            "inf_sup": self.inf_sup,
            "gap": self.gap,
            "iterations": self.iterations,
        }


def _resolve_subset(chain: FiniteChain, Y: SubsetSpec | None, mode: str) -> SubsetSpec:
    if mode == MODE_COMPACT:
        if Y is not None and Y.size != chain.d:
            raise ValueError("compact mode needs Y to be the whole state space")
        return SubsetSpec.full(chain.d)
    if mode != MODE_CONSTRAINED:
        raise ValueError(f"unknown mode {mode!r}")
    if Y is None:
        raise ValueError("constrained mode needs Y")
    return Y


class _RateOracle:
    """I(μ) with warm starts, plus admissible potentials for lower bounds."""

    def __init__(self, chain: FiniteChain, Y: SubsetSpec, mode: str, opts: RateOptions):
        self.chain = chain
        self.Y = Y
        self.mode = mode
        self.opts = opts
        self.phi = None
        self.evaluations = 0

    def __call__(self, mu) -> RateResult:
        self.evaluations += 1
        if self.mode == MODE_COMPACT:
            res = rate_compact(self.chain, mu, self.opts, phi0=self.phi)
        else:
            res = rate_constrained(self.chain, self.Y, mu, self.opts, phi0=self.phi)
        if res.maximizer is not None:
            self.phi = res.maximizer.phi
        return res

    def admissible(self, potential: LogPotential) -> np.ndarray:
        phi = potential.phi
        if self.mode == MODE_CONSTRAINED:
            phi = repair_superharmonic(self.chain, self.Y, phi)
        return phi

    def certificate(self, res: RateResult) -> np.ndarray:
        return self.admissible(res.maximizer if res.maximizer is not None else res.last_iterate)


def infimum_rate_over_C(
    chain: FiniteChain,
    Y: SubsetSpec | None,
    C: Polytope,
    mode: str = MODE_CONSTRAINED,
    opts: RateOptions | None = None,
) -> InfimumResult:
    """inf over μ in C of I(μ) by Frank-Wolfe with an LP oracle over the vertices of C."""
    opts = opts or RateOptions()
    Y = _resolve_subset(chain, Y, mode)
    if C.dim != Y.size:
        raise ValueError(f"convex set has dim {C.dim}, Y has {Y.size} states")
    V = C.vertices
    if V.shape[0] == 0:
        raise EmptyConvexSetError("C is empty")
    oracle = _RateOracle(chain, Y, mode, opts)

    lower = -math.inf
    certificate = None

    def bound_from(phi: np.ndarray) -> float:
        nonlocal lower, certificate
        g = subgradient(chain, Y, phi)
        _, value = linear_minimize(C, g)
        if value > lower:
            lower = value
            certificate = LogPotential.gauged(phi, Y.order[0])
        return value

    # start at the vertex centroid, falling back to vertices while I is infinite
    candidates = [(np.full(V.shape[0], 1.0 / V.shape[0]), V.mean(axis=0))]
    candidates += [(np.eye(V.shape[0])[i], V[i]) for i in range(V.shape[0])]
    weights = mu = res = None
    for w, point in candidates:
        res = oracle(point)
        bound_from(oracle.certificate(res))
        if not res.is_infinite:
            weights, mu = w, point
            break
    if weights is None:
        log.debug(f"I is infinite at every vertex of C; certified lower bound {lower:.6g}")
        return InfimumResult(
            value=math.inf,
            lower_bound=lower,
            gap=math.inf,
            argmin=None,
            certificate=certificate,
            iterations=0,
            status=RateStatus.INFINITE,
        )

    best_value, best_mu = res.value, mu.copy()
    L = 1.0
    iterations = 0
    for k in range(opts.fw_max_iter):
        iterations = k + 1
        phi = oracle.certificate(res)
        g = subgradient(chain, Y, phi)
        bound_from(phi)
        if best_value - lower <= opts.fw_tol:
            break

        scores = V @ g
        s = int(np.flatnonzero(scores <= scores.min() + _TIE_TOL)[0])
        fw_dir = V[s] - mu
        slope = float(g @ fw_dir)
        if opts.fw_step == FW_STEP_OPEN_LOOP:
            direction, gamma_max, away = fw_dir, 1.0, None
            gamma = 2.0 / (k + 2.0)
        else:
            active = np.flatnonzero(weights > 0.0)
            a = int(active[np.argmax(scores[active])])
            away_dir = mu - V[a]
            if weights[a] < 1.0 and float(g @ away_dir) < slope:
                direction, away = away_dir, a
                slope = float(g @ away_dir)
                gamma_max = weights[a] / (1.0 - weights[a])
            else:
                direction, gamma_max, away = fw_dir, 1.0, None
            norm2 = float(direction @ direction)
            if slope >= 0.0 or norm2 == 0.0:
                break
            gamma = min(gamma_max, -slope / (L * norm2))

        while True:
            trial = np.clip(mu + gamma * direction, 0.0, None)
            trial /= trial.sum()
            trial_res = oracle(trial)
            bound_from(oracle.certificate(trial_res))
            if trial_res.is_infinite:
                gamma *= 0.5
                if gamma < 1e-12:
                    break
                continue
            if opts.fw_step == FW_STEP_OPEN_LOOP:
                break
            norm2 = float(direction @ direction)
            if trial_res.value <= res.value + gamma * slope + 0.5 * L * gamma * gamma * norm2 + 1e-15:
                L *= 0.9
                break
            L *= 2.0
            gamma = min(gamma_max, -slope / (L * norm2))
            if gamma < 1e-12:
                break
        if trial_res.is_infinite or gamma < 1e-12:
            log.debug(f"Frank-Wolfe step collapsed at iteration {k}")
            break

        if away is None:
            weights = weights * (1.0 - gamma)
            weights[s] += gamma
        else:
            weights = weights * (1.0 + gamma)
            weights[away] -= gamma
        weights[weights < 1e-15] = 0.0
        weights /= weights.sum()
        mu, res = trial, trial_res
        if res.value < best_value:
            best_value, best_mu = res.value, mu.copy()

    gap = max(best_value - lower, 0.0)
    status = RateStatus.CONVERGED if gap <= opts.fw_tol else RateStatus.MAX_ITERATIONS
    if status is RateStatus.MAX_ITERATIONS:
        log.warning(f"Frank-Wolfe stopped with gap {gap:.3e} after {iterations} iterations")
    log.debug(f"inf_C I = {best_value:.9g} (lower {lower:.9g}), {oracle.evaluations} rate solves")
    return InfimumResult(
        value=best_value,
        lower_bound=min(lower, best_value),
        gap=gap,
        argmin=best_mu,
        certificate=certificate,
        iterations=iterations,
        status=status,
    )


def _inner_min(chain: FiniteChain, Y: SubsetSpec, C: Polytope, phi: np.ndarray):
    g = subgradient(chain, Y, phi)
    vertex, value = linear_minimize(C, g)
    return value, vertex


def _supergradient(chain: FiniteChain, Y: SubsetSpec, phi: np.ndarray, vertex: np.ndarray) -> np.ndarray:
    order = list(Y.order)
    P = chain.transition[order]
    lse = row_lse(P, phi)
    W = np.where(P > 0.0, P * np.exp(phi[None, :] - lse[:, None]), 0.0)
    grad = -(vertex @ W)
    grad[order] += vertex
    return grad


def minimax_gap(
    chain: FiniteChain,
    Y: SubsetSpec | None,
    C: Polytope,
    mode: str = MODE_CONSTRAINED,
    opts: RateOptions | None = None,
) -> MinimaxReport:
    """Compare inf_μ sup_φ Φ (Frank-Wolfe) with sup_φ inf_μ Φ (supergradient ascent)."""
    opts = opts or RateOptions()
    Y = _resolve_subset(chain, Y, mode)
    inf = infimum_rate_over_C(chain, Y, C, mode=mode, opts=opts)
    inf_sup = inf.value
    anchor = Y.order[0]
    phi = inf.certificate.phi.copy()
    best = inf.lower_bound
    unbounded = not math.isfinite(inf_sup)
    target = best + 1.0 if unbounded else inf_sup

    it = 0
    for it in range(1, opts.subgradient_iterations + 1):
        value, vertex = _inner_min(chain, Y, C, phi)
        best = max(best, value)
        if unbounded:
            if np.abs(phi).max() > opts.phi_cap:
                # Φ keeps growing along the ascent: the lower value is infinite too
                best = math.inf
                break
            if target - best <= 1e-10:
                target = best + 1.0
        elif target - best <= 1e-10:
            break
        grad = _supergradient(chain, Y, phi, vertex)
        grad[anchor] = 0.0
        norm2 = float(grad @ grad)
        if norm2 == 0.0:
            break
        # Polyak step toward the upper value
        phi = phi + ((target - value) / norm2) * grad
        if mode == MODE_CONSTRAINED:
            phi = repair_superharmonic(chain, Y, phi)
        phi -= phi[anchor]
    value, _ = _inner_min(chain, Y, C, phi)
    sup_inf = max(best, value)
    gap = 0.0 if inf_sup == sup_inf == math.inf else inf_sup - sup_inf
    log.debug(f"minimax: inf_sup={inf_sup:.9g} sup_inf={sup_inf:.9g} after {it} ascent steps")
    return MinimaxReport(sup_inf=sup_inf, inf_sup=inf_sup, gap=gap, iterations=it)
