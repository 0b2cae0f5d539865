from __future__ import annotations

import logging
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from dvrate.const import (
    REFLECTED_WALK,
    RETURN_KERNEL_TOL,
    STATIONARY_RESIDUAL_TOL,
    STOCHASTIC_TOL,
)
from dvrate.errors import NumericalError

log = logging.getLogger(__package__)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def spawn_rngs(seed: int, count: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


@dataclass(frozen=True, eq=False)
class FiniteChain:
    states: tuple
    transition: np.ndarray

    def __post_init__(self) -> None:
        P = np.array(self.transition, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 1:
            raise ValueError("transition must be a nonempty square matrix")
        if len(self.states) != P.shape[0]:
            raise ValueError(
                f"{len(self.states)} state labels for a {P.shape[0]}x{P.shape[0]} matrix"
            )
        if len(set(self.states)) != len(self.states):
            raise ValueError("state labels must be distinct")
        if not np.all(np.isfinite(P)) or np.any(P < 0.0) or np.any(P > 1.0):
            raise ValueError("transition entries must lie in [0, 1]")
        sums = P.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > STOCHASTIC_TOL)
        if bad.size:
            raise ValueError(f"row {int(bad[0])} sums to {sums[bad[0]]!r}")
        P.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "states", tuple(self.states))

    @property
    def d(self) -> int:
        return self.transition.shape[0]

    @classmethod
    def from_matrix(cls, transition, states=None) -> FiniteChain:
        P = np.asarray(transition, dtype=float)
        if states is None:
            states = tuple(range(P.shape[0]))
        return cls(states=tuple(states), transition=P)

    @classmethod
    def from_spec(cls, spec: dict) -> FiniteChain:
        transition = spec["transition"]
        states = spec.get("states")
        return cls.from_matrix(transition, states)

    def to_spec(self) -> dict:
        return {"states": list(self.states), "transition": self.transition.tolist()}

    def index_of(self, label) -> int:
        return self.states.index(label)

    def label_of(self, index: int):
        return self.states[index]

    def check_state(self, x) -> int:
        if isinstance(x, bool) or not isinstance(x, int | np.integer) or not 0 <= x < self.d:
            raise ValueError(f"invalid state {x!r}")
        return int(x)

    def successors(self, x: int) -> list[tuple[int, float]]:
        row = self.transition[self.check_state(x)]
        return [(int(z), float(row[z])) for z in np.flatnonzero(row > 0.0)]

    @cached_property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.transition, axis=1)

    @cached_property
    def last_positive(self) -> np.ndarray:
        positive = self.transition > 0.0
        return self.d - 1 - np.argmax(positive[:, ::-1], axis=1)


@dataclass(frozen=True, eq=False)
class LazyChain:
    """A chain on the integers given by a one-step function with bounded jumps."""

    step: Callable[[int], list[tuple[int, float]]]
    jump_bound: int
    lower: int | None = 0
    family: str = ""
    params: dict = field(default_factory=dict)

    def check_state(self, x) -> int:
        if isinstance(x, bool) or not isinstance(x, int | np.integer):
            raise ValueError(f"invalid state {x!r}")
        if self.lower is not None and x < self.lower:
            raise ValueError(f"state {x} below {self.lower}")
        return int(x)

    def transitions(self, x: int) -> list[tuple[int, float]]:
        x = self.check_state(x)
        out = [(int(z), float(p)) for z, p in self.step(x)]
        if not out:
            raise ValueError(f"no transitions out of {x}")
        total = sum(p for _, p in out)
        if any(p < 0.0 for _, p in out) or abs(total - 1.0) > STOCHASTIC_TOL:
            raise ValueError(f"transitions out of {x} are not a probability vector")
        if any(abs(z - x) > self.jump_bound for z, _ in out):
            raise ValueError(f"a jump out of {x} exceeds jump_bound={self.jump_bound}")
        return out

    def successors(self, x: int) -> list[tuple[int, float]]:
        return [(z, p) for z, p in self.transitions(x) if p > 0.0]

    @classmethod
    def reflected_walk(cls, p_up: float, p_stay: float = 0.0, cap: int | None = None) -> LazyChain:
        p_down = 1.0 - p_up - p_stay
        if min(p_up, p_stay) < 0.0 or p_down < -STOCHASTIC_TOL:
            raise ValueError("reflected_walk needs p_up, p_stay >= 0 with p_up + p_stay <= 1")
        p_down = max(p_down, 0.0)
        if cap is not None and cap < 0:
            raise ValueError("cap must be nonnegative")

        def step(x: int) -> list[tuple[int, float]]:
            if cap is not None and x > cap:
                raise ValueError(f"state {x} above cap {cap}")
            if cap == 0:
                return [(0, 1.0)]
            if x == 0:
                moves = [(0, p_stay + p_down), (1, p_up)]
            elif cap is not None and x == cap:
                moves = [(x - 1, p_down), (x, p_stay + p_up)]
            else:
                moves = [(x - 1, p_down), (x, p_stay), (x + 1, p_up)]
            return [(z, p) for z, p in moves if p > 0.0]

        params = {"p_up": p_up, "p_stay": p_stay, "cap": cap}
        return cls(step=step, jump_bound=1, lower=0, family=REFLECTED_WALK, params=params)

    @classmethod
    def from_spec(cls, spec: dict) -> LazyChain:
        spec = dict(spec)
        family = spec.pop("family")
        if family != REFLECTED_WALK:
            raise ValueError(f"unknown chain family {family!r}")
        p_up = float(spec.pop("p_up"))
        p_stay = float(spec.pop("p_stay", 0.0))
        cap = spec.pop("cap", None)
        if spec:
            raise ValueError(f"unknown {family} keys: {sorted(spec)}")
        return cls.reflected_walk(p_up=p_up, p_stay=p_stay, cap=None if cap is None else int(cap))

    def to_spec(self) -> dict:
        return {"family": self.family, **self.params}

    def truncate(self, cap: int) -> FiniteChain:
        """Finite chain on ``lower..cap``; mass jumping past ``cap`` is folded onto ``cap``."""
        lo = self.lower or 0
        if cap < lo:
            raise ValueError("cap below the lower end of the state space")
        d = cap - lo + 1
        P = np.zeros((d, d))
        for x in range(lo, cap + 1):
            for z, p in self.transitions(x):
                P[x - lo, min(z, cap) - lo] += p
        return FiniteChain.from_matrix(P, states=range(lo, cap + 1))


@dataclass(frozen=True)
class SubsetSpec:
    Y: frozenset
    Y_tilde: frozenset

    def __post_init__(self) -> None:
        object.__setattr__(self, "Y", frozenset(int(y) for y in self.Y))
        object.__setattr__(self, "Y_tilde", frozenset(int(y) for y in self.Y_tilde))
        if not self.Y:
            raise ValueError("Y must be nonempty")
        if not self.Y <= self.Y_tilde:
            raise ValueError("Y must be contained in Y_tilde")

    @classmethod
    def full(cls, d: int) -> SubsetSpec:
        states = frozenset(range(d))
        return cls(Y=states, Y_tilde=states)

    @cached_property
    def order(self) -> tuple[int, ...]:
        return tuple(sorted(self.Y))

    @cached_property
    def index(self) -> dict[int, int]:
        return {y: i for i, y in enumerate(self.order)}

    @property
    def size(self) -> int:
        return len(self.Y)

    def complement(self, d: int) -> np.ndarray:
        return np.array([x for x in range(d) if x not in self.Y], dtype=np.int64)

    def embed(self, mu, d: int) -> np.ndarray:
        """Extend a vector over Y (in ``order``) by zeros to the whole space."""
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.size,):
            raise ValueError(f"expected a vector over Y of length {self.size}")
        full = np.zeros(d)
        full[list(self.order)] = mu
        return full


@dataclass(frozen=True)
class Path:
    states: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "states", tuple(int(s) for s in self.states))
        if not self.states:
            raise ValueError("a path has at least one state")

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True, eq=False)
class ReturnKernel:
    Y: SubsetSpec
    R: np.ndarray
    escape: np.ndarray
    entry_matrix: np.ndarray

    def entry(self, x: int) -> np.ndarray:
        return self.entry_matrix[x]


def _states(path) -> tuple[int, ...]:
    if isinstance(path, Path):
        return path.states
    return tuple(int(s) for s in path)


def _subset(Y) -> frozenset:
    if isinstance(Y, SubsetSpec):
        return Y.Y
    return frozenset(int(y) for y in Y)


def pi_apply(chain: FiniteChain, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (chain.d,):
        raise ValueError(f"u has shape {u.shape}, expected ({chain.d},)")
    if not np.all(np.isfinite(u)) or np.any(u <= 0.0):
        raise ValueError("u must be finite and strictly positive")
    return chain.transition @ u


def advance(chain: FiniteChain | LazyChain, states: np.ndarray, rng: np.random.Generator, cache: dict | None = None) -> np.ndarray:
    """Move every entry of ``states`` one step; one uniform draw per entry."""
    u = rng.random(states.shape[0])
    if isinstance(chain, FiniteChain):
        cum = chain.cumulative[states]
        nxt = (u[:, None] >= cum).sum(axis=1)
        return np.minimum(nxt, chain.last_positive[states])

    if cache is None:
        cache = {}
    nxt = np.empty_like(states)
    for s in np.unique(states):
        s = int(s)
        if s not in cache:
            succ = chain.successors(s)
            targets = np.array([z for z, _ in succ], dtype=np.int64)
            cache[s] = (targets, np.cumsum([p for _, p in succ]))
        targets, cum = cache[s]
        mask = states == s
        idx = np.minimum((u[mask, None] >= cum).sum(axis=1), targets.size - 1)
        nxt[mask] = targets[idx]
    return nxt


def simulate(chain: FiniteChain | LazyChain, x: int, steps: int, seed: int) -> Path:
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    x = chain.check_state(x)
    rng = make_rng(seed)
    cache = {}
    current = np.array([x], dtype=np.int64)
    visited = [x]
    for _ in range(steps):
        current = advance(chain, current, rng, cache)
        visited.append(int(current[0]))
    return Path(states=tuple(visited), seed=seed)


def local_time(path, n: int, d: int | None = None) -> np.ndarray:
    states = _states(path)
    if n < 1:
        raise ValueError("n must be at least 1")
    if len(states) < n:
        raise ValueError(f"path of length {len(states)} is too short for n={n}")
    prefix = np.asarray(states[:n], dtype=np.int64)
    size = d if d is not None else int(prefix.max()) + 1
    return np.bincount(prefix, minlength=size)


def stopping_time_tau(path, Y, n: int) -> int | None:
    if n < 1:
        raise ValueError("n must be at least 1")
    Y = _subset(Y)
    visits = 0
    for k, s in enumerate(_states(path), start=1):
        if s in Y:
            visits += 1
            if visits == n:
                return k
    return None


def stopped_measure(path, Y: SubsetSpec, n: int) -> np.ndarray | None:
    tau = stopping_time_tau(path, Y, n)
    if tau is None:
        return None
    hist = np.zeros(Y.size)
    for s in _states(path)[:tau]:
        if s in Y.Y:
            hist[Y.index[s]] += 1.0
    return hist / n


def exit_set(chain: FiniteChain | LazyChain, Y: Iterable[int]) -> SubsetSpec:
    Y = frozenset(chain.check_state(y) for y in Y)
    if not Y:
        raise ValueError("Y must be nonempty")
    tilde = set(Y)
    for y in Y:
        tilde.update(z for z, _ in chain.successors(y))
    return SubsetSpec(Y=Y, Y_tilde=frozenset(tilde))


def can_reach(adjacency: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Boolean mask of the nodes with a path (of length >= 0) into ``targets``."""
    reach = np.asarray(targets, dtype=bool).copy()
    step = adjacency.astype(np.int64)
    while True:
        grown = reach | (step @ reach.astype(np.int64) > 0)
        if np.array_equal(grown, reach):
            return reach
        reach = grown


def return_kernel(chain: FiniteChain, Y: SubsetSpec) -> ReturnKernel:
    P = chain.transition
    d = chain.d
    order = np.array(Y.order, dtype=np.int64)
    if order.max() >= d:
        raise ValueError("Y has states outside the chain")
    outside = Y.complement(d)
    entry = np.zeros((d, Y.size))
    entry[order, np.arange(Y.size)] = 1.0

    if outside.size == 0:
        R = P[np.ix_(order, order)].copy()
        return ReturnKernel(Y=Y, R=R, escape=np.zeros(Y.size), entry_matrix=entry)

    Q = P[np.ix_(outside, outside)]
    B = P[np.ix_(outside, order)]
    # only states that can still reach Y are solved for; the rest is escape mass
    transient = np.flatnonzero(can_reach(Q > 0.0, B.sum(axis=1) > 0.0))
    H = np.zeros((outside.size, Y.size))
    if transient.size:
        M = np.eye(transient.size) - Q[np.ix_(transient, transient)]
        lu = lu_factor(M)
        HA = lu_solve(lu, B[transient])
        residual = float(np.abs(M @ HA - B[transient]).max())
        if residual > RETURN_KERNEL_TOL:
            raise NumericalError(f"first-entry solve residual {residual:.3e}")
        H[transient] = np.clip(HA, 0.0, None)

    R = P[np.ix_(order, order)] + P[np.ix_(order, outside)] @ H
    escape = np.clip(1.0 - R.sum(axis=1), 0.0, 1.0)
    entry[outside] = H
    log.debug(f"return kernel over Y={Y.order}: escape={escape.tolist()}")
    return ReturnKernel(Y=Y, R=R, escape=escape, entry_matrix=entry)


def is_irreducible(chain: FiniteChain) -> bool:
    graph = csr_matrix(chain.transition > 0.0)
    n_components, _ = connected_components(graph, directed=True, connection="strong")
    return n_components == 1


def stationary_distribution(chain: FiniteChain) -> np.ndarray:
    """Grassmann-Taksar-Heyman state reduction (subtraction free)."""
    if not is_irreducible(chain):
        raise NumericalError("chain is reducible; no unique stationary distribution")
    d = chain.d
    A = chain.transition.copy()
    scale = np.ones(d)
    for n in range(d - 1, 0, -1):
        s = A[n, :n].sum()
        scale[n] = s
        A[n, :n] /= s
        A[:n, :n] += np.outer(A[:n, n], A[n, :n])
    pi = np.zeros(d)
    pi[0] = 1.0
    for n in range(1, d):
        pi[n] = pi[:n] @ A[:n, n] / scale[n]
    pi /= pi.sum()
    residual = float(np.abs(pi @ chain.transition - pi).max())
    if residual > STATIONARY_RESIDUAL_TOL:
        raise NumericalError(f"stationary residual {residual:.3e}")
    return pi
