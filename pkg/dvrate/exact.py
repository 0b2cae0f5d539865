from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from dvrate.chain import FiniteChain, SubsetSpec, return_kernel
from dvrate.const import (
    ENUMERATION_MAX_PATHS,
    EXACT_MAX_N,
    EXACT_MAX_STATES,
    MEMBER_TOL,
)
from dvrate.convexset import Polytope
from dvrate.errors import NumericalError, SizeGuardError
from dvrate.rate import superharmonic_check
from dvrate.utils import compositions

log = logging.getLogger(__package__)

PROB_COLUMNS = ["n", "start_state", "probability", "escape_mass"]


@dataclass(frozen=True)
class CountVector:
    counts: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class ProbabilityReport:
    n: int
    per_start: dict
    escape: dict = field(default_factory=dict)

    @property
    def infimum(self) -> tuple[int, float]:
        x = min(self.per_start, key=lambda s: (self.per_start[s], s))
        return x, self.per_start[x]

    @property
    def best_start(self) -> tuple[int, float]:
        x = min(self.per_start, key=lambda s: (-self.per_start[s], s))
        return x, self.per_start[x]

    def to_dict(self) -> dict:
        x, p = self.infimum
        data = {
            "n": self.n,
            "per_start": {s: float(v) for s, v in self.per_start.items()},
            "escape": dict(self.escape),
            "infimum": {"state": x, "probability": float(p)},
        }
        if any(isinstance(v, Fraction) for v in self.per_start.values()):
            data["exact"] = {s: str(v) for s, v in self.per_start.items()}
        return data

    def csv_rows(self) -> list[dict]:
        return [
            {
                "n": self.n,
                "start_state": s,
                "probability": float(p),
                "escape_mass": self.escape.get(s, 0.0),
            }
            for s, p in sorted(self.per_start.items())
        ]


def _check_sizes(m: int, n: int) -> None:
    if n < 1:
        raise ValueError("n must be at least 1")
    if m > EXACT_MAX_STATES or n > EXACT_MAX_N:
        raise SizeGuardError(
            f"exact DP supports at most {EXACT_MAX_STATES} states and n <= {EXACT_MAX_N}, "
            f"got {m} states and n = {n}"
        )


def _count_dp(K: np.ndarray, init: np.ndarray, n: int):
    """Mass of (visit counts, current state) after n visits.

    ``init[s, z]`` is the mass of a first visit at z from start s and
    ``K[y, z]`` the mass of the next visit being z after y. Returns the
    count vectors (N, m) and their masses per start (s, N).
    """
    m = K.shape[0]
    comps = compositions(1, m)
    mass = np.zeros((init.shape[0], comps.shape[0], m), dtype=init.dtype)
    # compositions(1, m) lists e_0, e_1, ... in order
    for z in range(m):
        mass[:, z, z] = init[:, z]
    for k in range(1, n):
        nxt = compositions(k + 1, m)
        lookup = {tuple(row): i for i, row in enumerate(nxt.tolist())}
        new = np.zeros((init.shape[0], nxt.shape[0], m), dtype=init.dtype)
        for z in range(m):
            step = comps.copy()
            step[:, z] += 1
            inc = np.array([lookup[tuple(row)] for row in step.tolist()], dtype=np.int64)
            new[:, inc, z] += mass @ K[:, z]
        comps, mass = nxt, new
    return comps, mass.sum(axis=2)


def _leaf_mask(C: Polytope, comps: np.ndarray, n: int, rational: bool) -> np.ndarray:
    if not rational:
        mu = comps / n
        return np.all(mu @ C.A.T <= C.b + MEMBER_TOL, axis=1)
    A = [[Fraction(repr(float(a))) for a in row] for row in C.A]
    b = [Fraction(repr(float(v))) for v in C.b]
    out = np.zeros(comps.shape[0], dtype=bool)
    for i, row in enumerate(comps.tolist()):
        mu = [Fraction(c, n) for c in row]
        out[i] = all(sum(a * w for a, w in zip(ai, mu, strict=True)) <= bi for ai, bi in zip(A, b, strict=True))
    return out


def _sum_rows(masses: np.ndarray, mask: np.ndarray, rational: bool) -> list:
    if rational:
        return [sum(row[mask], Fraction(0)) for row in masses]
    return [math.fsum(row[mask]) for row in masses]


def _rational_matrix(P: np.ndarray) -> np.ndarray:
    out = np.empty(P.shape, dtype=object)
    for idx, p in np.ndenumerate(P):
        # decimal literals such as 0.1 are read back as the rationals they denote
        out[idx] = Fraction(repr(float(p)))
    return out


def exact_prob_compact(chain: FiniteChain, n: int, C: Polytope, rational: bool = False) -> ProbabilityReport:
    """P_x(L_n/n ∈ C) for every start x, with L_n the visit counts of X_0..X_{n-1}."""
    _check_sizes(chain.d, n)
    if C.dim != chain.d:
        raise ValueError(f"convex set has dim {C.dim}, chain has {chain.d} states")
    if rational:
        K = _rational_matrix(chain.transition)
        init = np.empty((chain.d, chain.d), dtype=object)
        for idx in np.ndindex(init.shape):
            init[idx] = Fraction(int(idx[0] == idx[1]))
    else:
        K = chain.transition
        init = np.eye(chain.d)
    comps, masses = _count_dp(K, init, n)
    probs = _sum_rows(masses, _leaf_mask(C, comps, n, rational), rational)
    per_start = {x: probs[x] for x in range(chain.d)}
    return ProbabilityReport(n=n, per_start=per_start, escape={x: 0.0 for x in range(chain.d)})


def exact_prob_stopped(chain: FiniteChain, Y: SubsetSpec, n: int, C: Polytope) -> ProbabilityReport:
    """P_x(L_n^Y ∈ C) for every start x in the exit set, through the return kernel."""
    _check_sizes(Y.size, n)
    if C.dim != Y.size:
        raise ValueError(f"convex set has dim {C.dim}, Y has {Y.size} states")
    rk = return_kernel(chain, Y)
    starts = sorted(Y.Y_tilde)
    init = rk.entry_matrix[starts]
    comps, masses = _count_dp(rk.R, init, n)
    probs = _sum_rows(masses, _leaf_mask(C, comps, n, False), False)
    reached = [math.fsum(row) for row in masses]
    per_start = {x: probs[i] for i, x in enumerate(starts)}
    escape = {x: max(0.0, 1.0 - reached[i]) for i, x in enumerate(starts)}
    log.debug(f"stopped DP n={n}: escape mass {escape}")
    return ProbabilityReport(n=n, per_start=per_start, escape=escape)


def count_law(chain: FiniteChain, Y: SubsetSpec, n: int, x: int) -> dict[CountVector, float]:
    """Law of n·L_n^Y on {τ < ∞} from start x in the exit set."""
    _check_sizes(Y.size, n)
    if x not in Y.Y_tilde:
        raise ValueError(f"start {x} is not in the exit set")
    rk = return_kernel(chain, Y)
    comps, masses = _count_dp(rk.R, rk.entry_matrix[[x]], n)
    return {
        CountVector(tuple(row)): float(p)
        for row, p in zip(comps.tolist(), masses[0], strict=True)
        if p > 0.0
    }


def _path_tree(chain: FiniteChain, x: int, t: int):
    """All positive-probability paths X_0..X_t from x, with their probabilities."""
    x = chain.check_state(x)
    if t < 0:
        raise ValueError("horizon must be nonnegative")
    if chain.d**t > ENUMERATION_MAX_PATHS:
        raise SizeGuardError(f"{chain.d}^{t} paths exceed {ENUMERATION_MAX_PATHS}")
    P = chain.transition
    paths = np.array([[x]], dtype=np.int64)
    probs = np.ones(1)
    for _ in range(t):
        weights = probs[:, None] * P[paths[:, -1]]
        rows, nxt = np.nonzero(weights)
        paths = np.hstack([paths[rows], nxt[:, None]])
        probs = weights[rows, nxt]
    return paths, probs


def enumerate_paths_expectation(
    chain: FiniteChain,
    x: int,
    horizon: int,
    f: Callable,
    vectorized: bool = False,
) -> float:
    """Σ over all paths X_0..X_horizon of (path probability)·f(path).

    With ``vectorized`` the functional receives the (N, horizon+1) array of
    paths and returns N values; otherwise it gets one tuple per path.
    """
    paths, probs = _path_tree(chain, x, horizon)
    if vectorized:
        values = np.asarray(f(paths), dtype=float)
    else:
        values = np.array([f(tuple(p)) for p in paths.tolist()], dtype=float)
    return math.fsum(probs * values)


def _check_u(chain: FiniteChain, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (chain.d,):
        raise ValueError(f"u has shape {u.shape}, expected ({chain.d},)")
    if not np.all(np.isfinite(u)) or np.any(u <= 0.0):
        raise ValueError("u must be finite and strictly positive")
    return u


def martingale_check(
    chain: FiniteChain,
    Y: SubsetSpec,
    u,
    x: int,
    horizon: int,
    n: int,
    stopped: bool = True,
) -> float:
    """max over t ≤ horizon of |E_x[M_{t∧T}] − u(x)|, T the time of the n-th visit to Y.

    M_t = ∏_{k<t} (u/πu)(X_k) · u(X_t). With ``stopped=False`` T is ignored.
    """
    u = _check_u(chain, u)
    if n < 1:
        raise ValueError("n must be at least 1")
    pu = chain.transition @ u
    paths, probs = _path_tree(chain, x, horizon)
    ratio = (u / pu)[paths]
    before = np.hstack([np.ones((paths.shape[0], 1)), np.cumprod(ratio[:, :-1], axis=1)])
    M = before * u[paths]

    # M_t = exp(Σ_{k≤t} ln(u/πu)(X_k)) · πu(X_t)
    alt = np.exp(np.cumsum(np.log(ratio), axis=1)) * pu[paths]
    drift = float(np.max(np.abs(alt - M) / M))
    if drift > 1e-9:
        raise NumericalError(f"martingale identity drift {drift:.3e}")

    in_Y = np.isin(paths, list(Y.Y))
    visits = np.cumsum(in_Y, axis=1)
    hit = visits >= n
    T = np.where(hit.any(axis=1), hit.argmax(axis=1), horizon + 1)
    rows = np.arange(paths.shape[0])
    worst = 0.0
    for t in range(horizon + 1):
        s = np.minimum(t, T) if stopped else np.full(paths.shape[0], t)
        expectation = math.fsum(probs * M[rows, s])
        worst = max(worst, abs(expectation - u[x]))
    return worst


@dataclass(frozen=True)
class MomentReport:
    n: int
    per_start: dict[int, float]
    per_start_bound: dict[int, float]
    holds: bool

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "per_start": self.per_start,
            "per_start_bound": self.per_start_bound,
            "holds": self.holds,
        }


def exponential_moment(chain: FiniteChain, Y: SubsetSpec, u, n: int) -> MomentReport:
    """E_x[exp(n ∫ ln(u/πu) dL_n^Y); τ < ∞] for every x in the exit set.

    For u superharmonic off Y each value is at most u(x) / inf u over the
    exit set, and the smallest is at most 1; ``holds`` reports both.
    """
    u = _check_u(chain, u)
    if n < 1:
        raise ValueError("n must be at least 1")
    rk = return_kernel(chain, Y)
    order = list(Y.order)
    r = u[order] / (chain.transition[order] @ u)
    # entry(x) · D (R D)^{n-1} · 1 with D = diag(r)
    vec = r.copy()
    for _ in range(n - 1):
        vec = r * (rk.R @ vec)
    starts = sorted(Y.Y_tilde)
    floor = float(u[starts].min())
    per_start = {x: float(rk.entry(x) @ vec) for x in starts}
    bound = {x: float(u[x] / floor) for x in starts}
    superharmonic = not superharmonic_check(chain, Y, u)
    holds = all(per_start[x] <= bound[x] * (1.0 + 1e-9) for x in starts)
    holds = holds and min(per_start.values()) <= 1.0 + 1e-9
    if superharmonic and not holds:
        log.warning(f"exponential moment exceeds its optional-stopping bound at n={n}")
    return MomentReport(n=n, per_start=per_start, per_start_bound=bound, holds=holds)


def brute_force_prob_compact(chain: FiniteChain, x: int, n: int, C: Polytope) -> float:
    """P_x(L_n/n ∈ C) by summing over every path X_0..X_{n-1}."""
    if C.dim != chain.d:
        raise ValueError("dimension mismatch")
    paths, probs = _path_tree(chain, x, n - 1)
    counts = np.stack([np.bincount(p, minlength=chain.d) for p in paths])
    mask = np.all((counts / n) @ C.A.T <= C.b + MEMBER_TOL, axis=1)
    return math.fsum(probs[mask])


def brute_force_prob_stopped(chain: FiniteChain, Y: SubsetSpec, x: int, n: int, C: Polytope, max_len: int = 64) -> float:
    """P_x(L_n^Y ∈ C) by depth-first enumeration of paths of length ≤ ``max_len``."""
    if C.dim != Y.size:
        raise ValueError("dimension mismatch")
    P = chain.transition
    total = []

    def walk(state: int, counts: tuple, visits: int, prob: float, length: int) -> None:
        if state in Y.Y:
            counts = tuple(c + (i == Y.index[state]) for i, c in enumerate(counts))
            visits += 1
            if visits == n:
                if C.member(np.array(counts, dtype=float) / n):
                    total.append(prob)
                return
        if length >= max_len:
            return
        for z in np.flatnonzero(P[state] > 0.0):
            walk(int(z), counts, visits, prob * P[state, z], length + 1)

    walk(chain.check_state(x), (0,) * Y.size, 0, 1.0, 1)
    return math.fsum(total)
