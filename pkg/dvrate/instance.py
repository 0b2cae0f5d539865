from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from dvrate.chain import FiniteChain, LazyChain, SubsetSpec, exit_set
from dvrate.config import RateOptions
from dvrate.convexset import Polytope
from dvrate.errors import ParseError
from dvrate.montecarlo import Witness

log = logging.getLogger(__package__)

INSTANCE_KEYS = {
    "chain",
    "Y",
    "C",
    "witness",
    "n_list",
    "samples",
    "seed",
    "horizon",
    "starts",
    "fallback",
    "rate_opts",
    "mu",
}


@dataclass
class InstanceFile:
    chain: FiniteChain | LazyChain
    Y: SubsetSpec
    C: Polytope
    witness: Witness | None = None
    n_list: list[int] = field(default_factory=lambda: [1])
    samples: int = 10_000
    seed: int = 0
    horizon: int = 10_000
    starts: list[int] | None = None
    fallback: bool = False
    rate_opts: dict = field(default_factory=dict)
    mu: str | list[float] | None = None

    @property
    def is_lazy(self) -> bool:
        return isinstance(self.chain, LazyChain)

    @property
    def is_full(self) -> bool:
        return not self.is_lazy and self.Y.size == self.chain.d

    @classmethod
    def load(cls, path: str) -> InstanceFile:
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except OSError as e:
            raise ParseError(f"cannot read instance {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ParseError(f"instance {path} is not valid JSON: {e}") from e
        return cls.parse(data)

    @classmethod
    def parse(cls, data) -> InstanceFile:
        if not isinstance(data, dict):
            raise ParseError("an instance is a JSON object")
        unknown = sorted(set(data) - INSTANCE_KEYS)
        if unknown:
            raise ParseError(f"unknown instance keys: {unknown}")
        if "chain" not in data:
            raise ParseError("instance has no chain")
        try:
            return cls._build(data)
        except ParseError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"malformed instance: {e!r}") from e

    @classmethod
    def _build(cls, data: dict) -> InstanceFile:
        spec = data["chain"]
        if "family" in spec:
            chain = LazyChain.from_spec(spec)
        else:
            chain = FiniteChain.from_spec(spec)

        if "Y" in data:
            Y = exit_set(chain, [int(y) for y in data["Y"]])
        elif isinstance(chain, LazyChain):
            raise ParseError("a lazy chain needs Y")
        else:
            Y = SubsetSpec.full(chain.d)

        C = Polytope.from_spec(data["C"], Y.size) if "C" in data else Polytope.simplex(Y.size)
        witness = Witness.from_spec(data["witness"]) if data.get("witness") else None

        n_list = [int(n) for n in data.get("n_list", [1])]
        if not n_list or any(n < 1 for n in n_list):
            raise ParseError("n_list must be a nonempty list of positive integers")
        starts = data.get("starts")
        if starts is not None:
            starts = [chain.check_state(int(s)) for s in starts]

        rate_opts = dict(data.get("rate_opts") or {})
        RateOptions.from_dict(rate_opts)

        mu = data.get("mu")
        if mu is not None and mu != "stationary":
            mu = [float(v) for v in mu]

        instance = cls(
            chain=chain,
            Y=Y,
            C=C,
            witness=witness,
            n_list=n_list,
            samples=int(data.get("samples", 10_000)),
            seed=int(data.get("seed", 0)),
            horizon=int(data.get("horizon", 10_000)),
            starts=starts,
            fallback=bool(data.get("fallback", False)),
            rate_opts=rate_opts,
            mu=mu,
        )
        if instance.samples < 1 or instance.horizon < 1:
            raise ParseError("samples and horizon must be positive")
        log.debug(f"instance: |Y|={Y.size} n_list={n_list} seed={instance.seed}")
        return instance
