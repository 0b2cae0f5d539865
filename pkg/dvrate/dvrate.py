from __future__ import annotations

import asyncio
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from dvrate import __version__
from dvrate.chain import stationary_distribution
from dvrate.config import Config
from dvrate.const import (
    MODE_COMPACT,
    MODE_CONSTRAINED,
    PROB_MODE_EXACT,
    PROB_MODE_MC,
    PROB_MODE_WITNESS,
)
from dvrate.errors import NumericalError, ParseError
from dvrate.exact import exact_prob_compact, exact_prob_stopped
from dvrate.instance import InstanceFile
from dvrate.montecarlo import mc_prob_compact, mc_prob_stopped, witness_bound
from dvrate.rate import RateStatus, rate_compact, rate_constrained
from dvrate.utils import deepcopy_data_no_sensitive_info, dumps, rows_to_csv
from dvrate.verify import (
    ROW_COLUMNS,
    VerificationRow,
    battery_rows,
    convergence_trend,
    verify_corollary,
    verify_theorem,
    verify_witness,
)


class DvRate:
    def __init__(self, config: Config):
        self.config = config

        # 初始化日志
        self.setup_logger()

        # 尝试从设置里加载配置
        self.try_init_setting()

        self.log.debug(f"config: {deepcopy_data_no_sensitive_info(self.config)}")

    def setup_logger(self):
        self.log = logging.getLogger("dvrate")
        if not logging.getLogger().handlers and not self.log.handlers:
            log_format = f"%(asctime)s [{__version__}] [%(levelname)s] %(filename)s:%(lineno)d: %(message)s"
            logging.basicConfig(format=log_format, datefmt="[%Y-%m-%d %H:%M:%S]")
        self.log.setLevel(logging.DEBUG if self.config.verbose else logging.INFO)

    def try_init_setting(self):
        filename = self.config.getsettingfile()
        try:
            with open(filename, encoding="utf-8") as f:
                data = json.loads(f.read())
                self.config.update_config(data)
        except FileNotFoundError:
            self.log.debug(f"The file {filename} does not exist.")
        except json.JSONDecodeError:
            self.log.warning(f"The file {filename} contains invalid JSON.")

    def rate_options(self, instance: InstanceFile):
        return self.config.rate_options(instance.rate_opts)

    def load_instance(self, path: str, seed_override: int | None = None) -> InstanceFile:
        instance = InstanceFile.load(path)
        if seed_override is not None:
            instance.seed = seed_override
        return instance

    # 解析 --mu 参数: "stationary" 或逗号分隔的概率
    def resolve_mu(self, instance: InstanceFile, mode: str, mu_arg: str | None):
        spec = mu_arg if mu_arg is not None else instance.mu
        if spec is None:
            raise ParseError("no measure given; use --mu or the instance key mu")
        if spec == "stationary":
            pi = stationary_distribution(instance.chain)
            if mode == MODE_COMPACT:
                return pi
            restricted = pi[list(instance.Y.order)]
            return restricted / restricted.sum()
        if isinstance(spec, str):
            try:
                spec = [float(v) for v in spec.split(",")]
            except ValueError as e:
                raise ParseError(f"malformed --mu {mu_arg!r}") from e
        return np.asarray(spec, dtype=float)

    def cmd_rate(self, instance: InstanceFile, mode: str = MODE_CONSTRAINED, mu_arg: str | None = None) -> dict:
        if instance.is_lazy:
            raise ParseError("rate needs a finite chain")
        opts = self.rate_options(instance)
        mu = self.resolve_mu(instance, mode, mu_arg)
        try:
            if mode == MODE_COMPACT:
                res = rate_compact(instance.chain, mu, opts)
            elif mode == MODE_CONSTRAINED:
                res = rate_constrained(instance.chain, instance.Y, mu, opts)
            else:
                raise ParseError(f"unknown mode {mode!r}")
        except ValueError as e:
            raise ParseError(str(e)) from e
        if res.status is RateStatus.MAX_ITERATIONS:
            raise NumericalError(f"rate ascent did not converge (gradient {res.gradient_norm:.3e})")
        self.log.info(f"I(mu) = {res.value} [{res.status.value}] in {res.iterations} iterations")
        return {"mode": mode, "mu": mu, **res.to_dict()}

    def cmd_prob(self, instance: InstanceFile, mode: str = PROB_MODE_EXACT) -> tuple[dict, list[dict] | None]:
        """Probabilities per n; exact mode also returns one CSV row per start."""
        results = []
        csv_rows = None
        if mode == PROB_MODE_EXACT:
            if instance.is_lazy:
                raise ParseError("exact probabilities need a finite chain")
            csv_rows = []
            for n in instance.n_list:
                if instance.is_full:
                    report = exact_prob_compact(instance.chain, n, instance.C)
                else:
                    report = exact_prob_stopped(instance.chain, instance.Y, n, instance.C)
                results.append(report.to_dict())
                csv_rows += report.csv_rows()
        elif mode == PROB_MODE_MC:
            starts = instance.starts or sorted(instance.Y.Y_tilde)
            for n in instance.n_list:
                per_start = {}
                for x in starts:
                    if instance.is_full:
                        est = mc_prob_compact(
                            instance.chain, x, n, instance.C, instance.samples, instance.seed, self.config.jobs
                        )
                    else:
                        est = mc_prob_stopped(
                            instance.chain,
                            instance.Y,
                            x,
                            n,
                            instance.C,
                            instance.samples,
                            max(instance.horizon, n),
                            instance.seed,
                            self.config.jobs,
                        )
                    per_start[x] = est.to_dict()
                results.append({"n": n, "per_start": per_start})
        elif mode == PROB_MODE_WITNESS:
            witness = self._witness(instance)
            for n in instance.n_list:
                results.append(witness_bound(instance.chain, instance.Y, witness, instance.C, n).to_dict())
        else:
            raise ParseError(f"unknown probability mode {mode!r}")
        return {"mode": mode, "seed": instance.seed, "results": results}, csv_rows

    def _witness(self, instance: InstanceFile):
        if instance.witness is not None:
            return instance.witness
        raise ParseError("instance has no witness")

    def cmd_verify(self, instance: InstanceFile) -> list[VerificationRow]:
        opts = self.rate_options(instance)
        rows = []
        if not instance.is_lazy:
            if instance.is_full:
                rows += verify_corollary(
                    instance.chain,
                    instance.C,
                    instance.n_list,
                    opts=opts,
                    fallback=instance.fallback,
                    samples=instance.samples,
                    seed=instance.seed,
                )
            else:
                rows += verify_theorem(
                    instance.chain,
                    instance.Y,
                    instance.C,
                    instance.n_list,
                    opts=opts,
                    fallback=instance.fallback,
                    samples=instance.samples,
                    horizon=instance.horizon,
                    seed=instance.seed,
                    witness=instance.witness,
                )
        if instance.witness is not None:
            rows += verify_witness(
                instance.chain,
                instance.Y,
                instance.witness,
                instance.C,
                instance.n_list,
                instance.starts or sorted(instance.Y.Y_tilde),
                instance.samples,
                instance.horizon,
                instance.seed,
            )
        elif instance.is_lazy:
            raise ParseError("a lazy chain is verified through a witness")
        failed = [r for r in rows if not r.holds]
        if failed:
            self.log.warning(f"{len(failed)} of {len(rows)} rows do not hold")
        return rows

    def cmd_trend(self, instance: InstanceFile) -> dict:
        if instance.is_lazy or not instance.is_full:
            raise ParseError("trend needs a finite chain with Y the whole space")
        report = convergence_trend(instance.chain, instance.C, instance.n_list, self.rate_options(instance))
        return report.to_dict()

    async def run_battery(self, kind: str, count: int, seed: int) -> list[VerificationRow]:
        """Seeded random instances ``seed, seed+1, ...`` run on ``jobs`` worker threads."""
        opts = self.config.rate_options()
        loop = asyncio.get_running_loop()
        with ThreadPoolExecutor(max_workers=self.config.jobs) as executor:
            tasks = [
                loop.run_in_executor(executor, battery_rows, kind, seed + i, opts)
                for i in range(count)
            ]
            results = await asyncio.gather(*tasks)
        rows = [row for chunk in results for row in chunk]
        failed = sum(not r.holds for r in rows)
        self.log.info(f"{kind} battery: {count} instances, {len(rows)} rows, {failed} failed")
        return rows

    def emit(self, data, rows: list[dict] | None = None, columns: list[str] = ROW_COLUMNS) -> str:
        text = dumps(data)
        out = self.config.out
        if out:
            out_dir = os.path.dirname(out)
            if out_dir and not os.path.exists(out_dir):
                os.makedirs(out_dir)
            with open(out, "w", encoding="utf-8") as f:
                if rows is not None and out.endswith(".csv"):
                    f.write(rows_to_csv(rows, columns))
                else:
                    f.write(text + "\n")
            self.log.info(f"wrote {out}")
        return text
