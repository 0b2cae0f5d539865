from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from dvrate.chain import FiniteChain, LazyChain, SubsetSpec, advance, spawn_rngs
from dvrate.const import CONFIDENCE, MC_BLOCK, MEMBER_TOL, WITNESS_TOL
from dvrate.convexset import Polytope, linear_minimize
from dvrate.errors import CertificateRefused
from dvrate.rate import superharmonic_check
from dvrate.utils import wilson_interval

log = logging.getLogger(__package__)


@dataclass(frozen=True)
class McEstimate:
    point: float
    ci95: tuple[float, float]
    samples: int
    truncated_mass: float = 0.0
    successes: int = 0
    seed: int | None = None

    def __post_init__(self) -> None:
        low, high = self.ci95
        if not low <= self.point <= high:
            raise ValueError("point estimate outside its interval")
        if not 0.0 <= self.truncated_mass <= 1.0:
            raise ValueError("truncated_mass must lie in [0, 1]")

    @property
    def bracket(self) -> tuple[float, float]:
        """Interval that also covers every success hidden in truncated runs."""
        low, high = self.ci95
        return low, min(1.0, high + self.truncated_mass)

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "ci95": list(self.ci95),
            "bracket": list(self.bracket),
            "samples": self.samples,
            "successes": self.successes,
            "truncated_mass": self.truncated_mass,
            "seed": self.seed,
        }


def _blocks(samples: int) -> list[int]:
    if samples < 1:
        raise ValueError("samples must be at least 1")
    full, rest = divmod(samples, MC_BLOCK)
    return [MC_BLOCK] * full + ([rest] if rest else [])


def _run_blocks(block_fn, samples: int, seed: int, jobs: int) -> tuple[int, int]:
    """Sum (successes, truncated) over seed blocks; the result does not depend on ``jobs``."""
    sizes = _blocks(samples)
    rngs = spawn_rngs(seed, len(sizes))
    if jobs > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            results = list(executor.map(block_fn, sizes, rngs))
    else:
        results = [block_fn(size, rng) for size, rng in zip(sizes, rngs, strict=True)]
    return sum(r[0] for r in results), sum(r[1] for r in results)


def _in_C(C: Polytope, counts: np.ndarray, n: int) -> np.ndarray:
    mu = counts / n
    return np.all(mu @ C.A.T <= C.b + MEMBER_TOL, axis=1)


def _estimate(successes: int, truncated: int, samples: int, seed: int) -> McEstimate:
    low, high = wilson_interval(successes, samples, CONFIDENCE)
    return McEstimate(
        point=successes / samples,
        ci95=(low, high),
        samples=samples,
        truncated_mass=truncated / samples,
        successes=successes,
        seed=seed,
    )


def mc_prob_compact(chain: FiniteChain, x: int, n: int, C: Polytope, samples: int, seed: int, jobs: int = 1) -> McEstimate:
    """Fraction of simulated prefixes X_0..X_{n-1} from x whose empirical measure is in C."""
    x = chain.check_state(x)
    if n < 1:
        raise ValueError("n must be at least 1")
    if C.dim != chain.d:
        raise ValueError(f"convex set has dim {C.dim}, chain has {chain.d} states")

    def block(size: int, rng: np.random.Generator) -> tuple[int, int]:
        states = np.full(size, x, dtype=np.int64)
        counts = np.zeros((size, chain.d), dtype=np.int64)
        rows = np.arange(size)
        counts[rows, states] += 1
        for _ in range(n - 1):
            states = advance(chain, states, rng)
            counts[rows, states] += 1
        return int(_in_C(C, counts, n).sum()), 0

    successes, _ = _run_blocks(block, samples, seed, jobs)
    return _estimate(successes, 0, samples, seed)


def mc_prob_stopped(
    chain: FiniteChain | LazyChain,
    Y: SubsetSpec,
    x: int,
    n: int,
    C: Polytope,
    samples: int,
    horizon: int,
    seed: int,
    jobs: int = 1,
) -> McEstimate:
    """Estimate P_x(L_n^Y ∈ C); runs without n visits to Y by ``horizon`` count as truncated."""
    x = chain.check_state(x)
    if n < 1:
        raise ValueError("n must be at least 1")
    if horizon < n:
        raise ValueError("horizon must be at least n")
    if C.dim != Y.size:
        raise ValueError(f"convex set has dim {C.dim}, Y has {Y.size} states")
    order = np.array(Y.order, dtype=np.int64)

    def y_index(states: np.ndarray) -> np.ndarray:
        idx = np.full(states.shape[0], -1, dtype=np.int64)
        for i, y in enumerate(order):
            idx[states == y] = i
        return idx

    def block(size: int, rng: np.random.Generator) -> tuple[int, int]:
        cache = {}
        states = np.full(size, x, dtype=np.int64)
        counts = np.zeros((size, Y.size), dtype=np.int64)
        successes = 0
        for t in range(horizon):
            if t:
                states = advance(chain, states, rng, cache)
            idx = y_index(states)
            hit = np.flatnonzero(idx >= 0)
            counts[hit, idx[hit]] += 1
            done = counts.sum(axis=1) >= n
            if np.any(done):
                successes += int(_in_C(C, counts[done], n).sum())
                states, counts = states[~done], counts[~done]
            if states.shape[0] == 0:
                break
        return successes, int(states.shape[0])

    successes, truncated = _run_blocks(block, samples, seed, jobs)
    if truncated:
        log.debug(f"{truncated} of {samples} runs reached the horizon {horizon}")
    return _estimate(successes, truncated, samples, seed)


@dataclass(frozen=True)
class Witness:
    """Positive function given on ``window`` and equal to ``tail_constant`` outside it."""

    values: dict[int, float]
    tail_constant: float
    window: tuple[int, int]

    def __post_init__(self) -> None:
        lo, hi = (int(w) for w in self.window)
        if lo > hi:
            raise ValueError("window is empty")
        values = {int(k): float(v) for k, v in self.values.items()}
        missing = [s for s in range(lo, hi + 1) if s not in values]
        if missing:
            raise ValueError(f"witness has no value at {missing[:5]}")
        if any(s < lo or s > hi for s in values):
            raise ValueError("witness values outside the window")
        every = [*values.values(), float(self.tail_constant)]
        if not all(math.isfinite(v) and v > 0.0 for v in every):
            raise ValueError("witness values must be finite and positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "window", (lo, hi))
        object.__setattr__(self, "tail_constant", float(self.tail_constant))

    def value(self, x: int) -> float:
        return self.values.get(int(x), self.tail_constant)

    def vector(self, d: int) -> np.ndarray:
        return np.array([self.value(x) for x in range(d)])

    @classmethod
    def from_potential(cls, phi, lo: int = 0) -> Witness:
        u = np.exp(np.asarray(phi, dtype=float))
        values = {lo + i: float(v) for i, v in enumerate(u)}
        return cls(values=values, tail_constant=float(u[-1]), window=(lo, lo + u.shape[0] - 1))

    @classmethod
    def from_spec(cls, spec: dict) -> Witness:
        spec = dict(spec)
        values = spec.pop("values")
        tail = spec.pop("tail_constant")
        window = spec.pop("window")
        if spec:
            raise ValueError(f"unknown witness keys: {sorted(spec)}")
        if len(window) != 2:
            raise ValueError("window is a pair [lo, hi]")
        return cls(
            values={int(k): float(v) for k, v in values.items()},
            tail_constant=float(tail),
            window=(int(window[0]), int(window[1])),
        )

    def to_spec(self) -> dict:
        return {
            "values": {str(k): v for k, v in sorted(self.values.items())},
            "tail_constant": self.tail_constant,
            "window": list(self.window),
        }


@dataclass(frozen=True)
class WitnessBound:
    n: int
    bound: float
    value: float
    argmin: list[float] | None
    per_start: dict[int, float] = field(default_factory=dict)

    @property
    def informative(self) -> bool:
        return self.bound < 1.0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "bound": self.bound,
            "value": self.value,
            "argmin": self.argmin,
            "informative": self.informative,
            "per_start": self.per_start,
        }


def _exp_neg(n: int, v: float) -> float:
    try:
        return math.exp(-n * v)
    except OverflowError:
        return math.inf


def witness_bound(
    chain: FiniteChain | LazyChain,
    Y: SubsetSpec,
    witness,
    C: Polytope,
    n: int,
) -> WitnessBound:
    """exp(−n · min over C of Σ μ(y) ln(u(y)/πu(y))) for one superharmonic witness u.

    ``witness`` is a ``Witness`` or, for a finite chain, a positive vector.
    Per-start bounds scale by u(x) / min u over the exit set.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if C.dim != Y.size:
        raise ValueError(f"convex set has dim {C.dim}, Y has {Y.size} states")
    if isinstance(chain, FiniteChain):
        u = witness.vector(chain.d) if isinstance(witness, Witness) else np.asarray(witness, dtype=float)
        violations = superharmonic_check(chain, Y, u, tol=WITNESS_TOL)

        def value(s: int) -> float:
            return float(u[s])

        def pi_u(s: int) -> float:
            return float(chain.transition[s] @ u)
    else:
        if not isinstance(witness, Witness):
            raise ValueError("a lazy chain needs a Witness")
        lo, hi = witness.window
        need_lo = min(Y.Y_tilde) - chain.jump_bound
        if chain.lower is not None:
            need_lo = max(need_lo, chain.lower)
        if lo > need_lo or hi < max(Y.Y_tilde) + chain.jump_bound:
            raise ValueError("witness window must cover the exit set plus one jump")
        violations = superharmonic_check(chain, Y, witness, tol=WITNESS_TOL)
        value = witness.value

        def pi_u(s: int) -> float:
            return math.fsum(p * witness.value(z) for z, p in chain.transitions(s))

    if violations:
        log.warning(f"witness refused: {len(violations)} superharmonicity violation(s)")
        raise CertificateRefused(violations)

    starts = sorted(Y.Y_tilde)
    floor = min(value(s) for s in starts)
    g = np.array([math.log(value(y) / pi_u(y)) for y in Y.order])
    lp = linear_minimize(C, g)
    if lp is None:
        return WitnessBound(n=n, bound=0.0, value=math.inf, argmin=None, per_start={s: 0.0 for s in starts})
    argmin, v = lp
    bound = _exp_neg(n, v)
    per_start = {s: value(s) / floor * bound for s in starts}
    log.debug(f"witness bound n={n}: v={v:.6g} bound={bound:.6g}")
    return WitnessBound(n=n, bound=bound, value=v, argmin=argmin.tolist(), per_start=per_start)
