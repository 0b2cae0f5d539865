from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from dvrate.chain import (
    FiniteChain,
    LazyChain,
    SubsetSpec,
    exit_set,
    is_irreducible,
    make_rng,
    return_kernel,
    stationary_distribution,
)
from dvrate.config import RateOptions
from dvrate.const import (
    EXACT_MAX_N,
    MODE_COMPACT,
    MODE_CONSTRAINED,
    ROW_TOL,
    SUPERMULT_TOL,
)
from dvrate.convexset import InfimumResult, Polytope, infimum_rate_over_C
from dvrate.errors import NumericalError, SizeGuardError
from dvrate.exact import exact_prob_compact, exact_prob_stopped
from dvrate.montecarlo import Witness, mc_prob_compact, mc_prob_stopped, witness_bound
from dvrate.rate import repair_superharmonic, superharmonic_extension
from dvrate.utils import neg_log, safe_exp_neg

log = logging.getLogger(__package__)

ROW_COLUMNS = ["mode", "n", "lhs", "rhs", "slack", "holds", "seed"]

MODE_THEOREM = "theorem"
MODE_COROLLARY = "corollary"
MODE_WITNESS = "witness"
MODE_MC = "mc"


@dataclass(frozen=True)
class VerificationRow:
    n: int
    lhs: float
    rhs: float
    mode: str
    seed: int | None = None
    # certified or sampled upper end for the left side; None for exact rows
    lhs_high: float | None = None
    start: int | None = None
    best_start: int | None = None
    best_start_lhs: float | None = None
    rate: float | None = None
    tol: float = ROW_TOL

    @property
    def slack(self) -> float:
        upper = self.lhs if self.lhs_high is None else self.lhs_high
        return self.rhs - upper

    @property
    def holds(self) -> bool:
        if self.lhs_high is None:
            return self.slack >= -self.tol
        return self.lhs_high <= self.rhs + self.tol

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n": self.n,
            "lhs": self.lhs,
            "lhs_high": self.lhs_high,
            "rhs": self.rhs,
            "slack": self.slack,
            "holds": self.holds,
            "seed": self.seed,
            "start": self.start,
            "best_start": self.best_start,
            "best_start_lhs": self.best_start_lhs,
            "rate": self.rate,
            "tol": self.tol,
        }


def _certified_rate(inf: InfimumResult) -> float:
    # I ≥ 0, so a negative certified bound is replaced by 0
    return max(inf.lower_bound, 0.0)


def _rows_for_empty_C(n_list, mode: str, seed) -> list[VerificationRow]:
    return [VerificationRow(n=n, lhs=0.0, rhs=0.0, mode=mode, seed=seed, rate=math.inf) for n in n_list]


def _mc_row(n: int, rhs: float, rate: float, estimates: dict, mode: str, seed) -> VerificationRow:
    points = {x: e.point for x, e in estimates.items()}
    highs = {x: e.bracket[1] for x, e in estimates.items()}
    low_start = min(points, key=lambda s: (points[s], s))
    best = min(points, key=lambda s: (-points[s], s))
    return VerificationRow(
        n=n,
        lhs=points[low_start],
        lhs_high=min(highs.values()),
        rhs=rhs,
        mode=mode,
        seed=seed,
        best_start=best,
        best_start_lhs=points[best],
        rate=rate,
    )


def _witness_row(chain, Y: SubsetSpec, witness, C: Polytope, n: int, rhs: float, rate: float, seed) -> VerificationRow:
    # min over starts of a certified upper bound on P_x bounds the infimum from above
    wb = witness_bound(chain, Y, witness, C, n)
    start = min(wb.per_start, key=lambda s: (wb.per_start[s], s))
    upper = wb.per_start[start]
    return VerificationRow(
        n=n,
        lhs=upper,
        lhs_high=upper,
        rhs=rhs,
        mode=MODE_WITNESS,
        seed=seed,
        start=start,
        rate=rate,
    )


def verify_theorem(
    chain: FiniteChain,
    Y: SubsetSpec,
    C: Polytope,
    n_list,
    opts: RateOptions | None = None,
    fallback: bool = False,
    samples: int = 10_000,
    horizon: int = 10_000,
    seed: int = 0,
    witness=None,
) -> list[VerificationRow]:
    """inf over the exit set of P_x(L_n^Y ∈ C) against exp(−n inf_C I).

    Past the exact guard (with ``fallback``) the left side comes from the
    witness bound when ``witness`` is given, else from sampling.
    """
    if C.is_empty:
        return _rows_for_empty_C(n_list, MODE_THEOREM, seed)
    inf = infimum_rate_over_C(chain, Y, C, mode=MODE_CONSTRAINED, opts=opts)
    rate = _certified_rate(inf)
    rows = []
    for n in n_list:
        rhs = safe_exp_neg(n, rate)
        try:
            report = exact_prob_stopped(chain, Y, n, C)
        except SizeGuardError:
            if not fallback:
                raise
            if witness is not None:
                log.info(f"n={n} exceeds the exact guard, using the witness bound")
                rows.append(_witness_row(chain, Y, witness, C, n, rhs, rate, seed))
                continue
            log.info(f"n={n} exceeds the exact guard, sampling instead")
            estimates = {
                x: mc_prob_stopped(chain, Y, x, n, C, samples, max(horizon, n), seed)
                for x in sorted(Y.Y_tilde)
            }
            rows.append(_mc_row(n, rhs, rate, estimates, MODE_MC, seed))
            continue
        _, lhs = report.infimum
        best, best_lhs = report.best_start
        rows.append(
            VerificationRow(
                n=n,
                lhs=lhs,
                rhs=rhs,
                mode=MODE_THEOREM,
                seed=seed,
                best_start=best,
                best_start_lhs=best_lhs,
                rate=rate,
            )
        )
    return rows


def verify_corollary(
    chain: FiniteChain,
    C: Polytope,
    n_list,
    opts: RateOptions | None = None,
    fallback: bool = False,
    samples: int = 10_000,
    seed: int = 0,
) -> list[VerificationRow]:
    """inf over all starts of P_x(L_n/n ∈ C) against exp(−n inf_C I)."""
    if C.is_empty:
        return _rows_for_empty_C(n_list, MODE_COROLLARY, seed)
    inf = infimum_rate_over_C(chain, None, C, mode=MODE_COMPACT, opts=opts)
    rate = _certified_rate(inf)
    rows = []
    for n in n_list:
        rhs = safe_exp_neg(n, rate)
        try:
            report = exact_prob_compact(chain, n, C)
        except SizeGuardError:
            if not fallback:
                raise
            estimates = {x: mc_prob_compact(chain, x, n, C, samples, seed) for x in range(chain.d)}
            rows.append(_mc_row(n, rhs, rate, estimates, MODE_MC, seed))
            continue
        _, lhs = report.infimum
        best, best_lhs = report.best_start
        rows.append(
            VerificationRow(
                n=n,
                lhs=lhs,
                rhs=rhs,
                mode=MODE_COROLLARY,
                seed=seed,
                best_start=best,
                best_start_lhs=best_lhs,
                rate=rate,
            )
        )
    return rows


def verify_witness(
    chain: FiniteChain | LazyChain,
    Y: SubsetSpec,
    witness,
    C: Polytope,
    n_list,
    starts,
    samples: int,
    horizon: int,
    seed: int,
) -> list[VerificationRow]:
    """Monte Carlo brackets from each listed start against the per-start witness bound."""
    rows = []
    for n in n_list:
        wb = witness_bound(chain, Y, witness, C, n)
        for x in starts:
            if x not in wb.per_start:
                raise ValueError(f"start {x} is not in the exit set")
            est = mc_prob_stopped(chain, Y, x, n, C, samples, max(horizon, n), seed)
            rows.append(
                VerificationRow(
                    n=n,
                    lhs=est.point,
                    lhs_high=est.bracket[1],
                    rhs=wb.per_start[x],
                    mode=MODE_WITNESS,
                    seed=seed,
                    start=x,
                    rate=wb.value,
                )
            )
    return rows


@dataclass(frozen=True)
class SupermultReport:
    rows: list[dict]

    @property
    def holds(self) -> bool:
        return all(r["holds"] for r in self.rows)

    def to_dict(self) -> dict:
        return {"holds": self.holds, "rows": self.rows}


def verify_supermultiplicative(chain: FiniteChain, C: Polytope, pairs) -> SupermultReport:
    """φ_{m+n}(C) ≥ φ_m(C)·φ_n(C) with φ_k = inf_x P_x(L_k/k ∈ C)."""
    cache: dict[int, float] = {}

    def phi(k: int) -> float:
        if k not in cache:
            cache[k] = exact_prob_compact(chain, k, C).infimum[1]
        return cache[k]

    rows = []
    for m, n in pairs:
        if m < 1 or n < 1:
            raise ValueError("m and n must be at least 1")
        joint = phi(m + n)
        product = phi(m) * phi(n)
        rows.append(
            {
                "m": m,
                "n": n,
                "phi_m": phi(m),
                "phi_n": phi(n),
                "phi_m_plus_n": joint,
                "holds": joint >= product - SUPERMULT_TOL,
            }
        )
    return SupermultReport(rows=rows)


@dataclass(frozen=True)
class SubadditiveReport:
    is_subadditive: bool
    running_min_ratio: list[float]
    inf_ratio: float
    tail_liminf: float
    violations: list[tuple[int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "is_subadditive": self.is_subadditive,
            "running_min_ratio": self.running_min_ratio,
            "inf_ratio": self.inf_ratio,
            "tail_liminf": self.tail_liminf,
            "violations": self.violations,
        }


def subadditive_limit_check(f, tol: float = 1e-9) -> SubadditiveReport:
    """Pairwise f(m+n) ≤ f(m) + f(n) on the given range, f[0] being f(1).

    Values live in [0, ∞]; a ≤ ∞ always holds. The tail liminf is the
    minimum ratio over the last third of the range.
    """
    values = [float(v) for v in f]
    if not values:
        raise ValueError("f must have at least one value")
    if any(math.isnan(v) or v < -tol for v in values):
        raise ValueError("f takes values in [0, inf]")
    N = len(values)
    violations = []
    for total in range(2, N + 1):
        for m in range(1, total // 2 + 1):
            n = total - m
            if values[total - 1] > values[m - 1] + values[n - 1] + tol:
                violations.append((m, n))
    ratios = [v / k for k, v in enumerate(values, start=1)]
    running = []
    current = math.inf
    for r in ratios:
        current = min(current, r)
        running.append(current)
    tail = ratios[(2 * N) // 3 :] or ratios[-1:]
    return SubadditiveReport(
        is_subadditive=not violations,
        running_min_ratio=running,
        inf_ratio=running[-1],
        tail_liminf=min(tail),
        violations=violations,
    )


@dataclass(frozen=True)
class TrendRow:
    n: int
    phi_n: float
    rate_n: float
    inf_rate: float

    @property
    def excluded(self) -> bool:
        return self.phi_n <= 0.0

    @property
    def holds(self) -> bool:
        return self.excluded or self.rate_n >= self.inf_rate - ROW_TOL

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "phi_n": self.phi_n,
            "rate_n": self.rate_n,
            "inf_rate": self.inf_rate,
            "holds": self.holds,
            "excluded": self.excluded,
        }


@dataclass(frozen=True)
class TrendReport:
    rows: list[TrendRow]
    doubling: list[dict]

    @property
    def holds(self) -> bool:
        return all(r.holds for r in self.rows) and all(d["holds"] for d in self.doubling)

    def to_dict(self) -> dict:
        return {
            "holds": self.holds,
            "rows": [r.to_dict() for r in self.rows],
            "doubling": self.doubling,
        }


def convergence_trend(chain: FiniteChain, C: Polytope, n_list, opts: RateOptions | None = None) -> TrendReport:
    """(n, −(1/n) ln φ_n(C), inf_C I) rows plus the φ_{2n} ≥ φ_n² doubling checks."""
    if C.is_empty:
        inf_rate = math.inf
    else:
        inf_rate = _certified_rate(infimum_rate_over_C(chain, None, C, mode=MODE_COMPACT, opts=opts))
    cache: dict[int, float] = {}

    def phi(k: int) -> float:
        if k not in cache:
            cache[k] = min(1.0, exact_prob_compact(chain, k, C).infimum[1])
        return cache[k]

    rows = [TrendRow(n=n, phi_n=phi(n), rate_n=neg_log(phi(n)) / n, inf_rate=inf_rate) for n in n_list]
    doubling = []
    for n in n_list:
        if 2 * n > EXACT_MAX_N:
            continue
        doubling.append(
            {
                "n": n,
                "phi_n": phi(n),
                "phi_2n": phi(2 * n),
                "holds": phi(2 * n) >= phi(n) ** 2 - SUPERMULT_TOL,
            }
        )
    return TrendReport(rows=rows, doubling=doubling)


def random_chain(rng: np.random.Generator, d: int, sparsity: float = 0.0, irreducible: bool = True, max_tries: int = 1000) -> FiniteChain:
    """Dirichlet(1,...,1) rows on random supports, resampled until irreducible if asked."""
    if d < 1:
        raise ValueError("d must be at least 1")
    for _ in range(max_tries):
        P = np.zeros((d, d))
        for y in range(d):
            support = rng.random(d) >= sparsity
            if not support.any():
                support[rng.integers(d)] = True
            P[y, support] = rng.dirichlet(np.ones(int(support.sum())))
        chain = FiniteChain.from_matrix(P)
        if not irreducible or is_irreducible(chain):
            return chain
    raise ValueError(f"no irreducible chain found in {max_tries} tries")


def random_subset(rng: np.random.Generator, d: int, size: int) -> list[int]:
    size = max(1, min(size, d))
    return sorted(int(s) for s in rng.choice(d, size=size, replace=False))


def random_polytope(rng: np.random.Generator, dim: int, halfspaces: int = 2, margin: float = 0.2, exclude=None) -> Polytope:
    """Random half-spaces, each loosened so that one Dirichlet point stays feasible.

    With ``exclude`` (and dim ≥ 2) the first half-space separates that
    measure from the feasible point, so C never contains it.
    """
    point = rng.dirichlet(np.ones(dim))
    rows = []
    if exclude is not None and dim >= 2:
        exclude = np.asarray(exclude, dtype=float)
        a = rng.normal(size=dim)
        if a @ point > a @ exclude:
            a = -a
        if a @ exclude - a @ point < 1e-3:
            a = exclude - point
        low, high = float(a @ point), float(a @ exclude)
        rows.append((a, low + rng.uniform(0.2, 0.8) * (high - low)))
        halfspaces -= 1
    for _ in range(max(halfspaces, 0)):
        a = rng.normal(size=dim)
        rows.append((a, float(a @ point + margin * rng.random())))
    return Polytope.from_halfspaces(dim, rows)


def returned_law(chain: FiniteChain, Y: SubsetSpec) -> np.ndarray:
    """Stationary law of the chain watched on Y (the centre the stopped measures concentrate on)."""
    if Y.size == chain.d:
        return stationary_distribution(chain)
    R = return_kernel(chain, Y).R
    R = R / R.sum(axis=1, keepdims=True)
    return stationary_distribution(FiniteChain.from_matrix(R))


def reflected_walk_witness(walk: LazyChain, Y: SubsetSpec, cap: int, C: Polytope, opts: RateOptions | None = None) -> Witness:
    """Eventually constant witness from the certified minimiser of I over C on the walk capped at ``cap``.

    Its witness value is at least the certified lower bound of inf_C I.
    """
    finite = walk.truncate(cap)
    lo = walk.lower or 0
    Y_finite = SubsetSpec(
        Y=frozenset(y - lo for y in Y.Y),
        Y_tilde=frozenset(y - lo for y in Y.Y_tilde if y <= cap),
    )
    inf = infimum_rate_over_C(finite, Y_finite, C, mode=MODE_CONSTRAINED, opts=opts)
    if inf.certificate is None:
        raise NumericalError("no certified potential for the capped walk")
    phi = repair_superharmonic(finite, Y_finite, inf.certificate.phi)
    u_Y = np.exp(phi[list(Y_finite.order)])
    u = superharmonic_extension(finite, Y_finite, u_Y)
    log.debug(f"walk witness on 0..{cap}: certified rate {inf.lower_bound:.6g}")
    return Witness.from_potential(np.log(u), lo=lo)


def battery_rows(kind: str, seed: int, opts: RateOptions | None = None) -> list[VerificationRow]:
    """One seeded random instance of the theorem or corollary battery.

    C is drawn to exclude the law the empirical measures settle on, so the
    bound is below 1.
    """
    rng = make_rng(seed)
    d = int(rng.integers(2, 5))
    chain = random_chain(rng, d, sparsity=float(rng.choice([0.0, 0.3])))
    n_list = sorted({int(n) for n in rng.integers(1, 13, size=3)})
    if kind == MODE_COROLLARY:
        C = random_polytope(rng, d, halfspaces=int(rng.integers(1, 3)), exclude=stationary_distribution(chain))
        return verify_corollary(chain, C, n_list, opts=opts, seed=seed)
    if kind != MODE_THEOREM:
        raise ValueError(f"unknown battery kind {kind!r}")
    Y = exit_set(chain, random_subset(rng, d, int(rng.integers(1, min(3, d) + 1))))
    C = random_polytope(rng, Y.size, halfspaces=int(rng.integers(1, 3)), exclude=returned_law(chain, Y))
    return verify_theorem(chain, Y, C, n_list, opts=opts, seed=seed)
