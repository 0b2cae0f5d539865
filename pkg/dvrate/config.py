from __future__ import annotations

import argparse
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import get_type_hints

from dvrate.const import (
    ARMIJO,
    DEFAULT_MAX_ITER,
    DEFAULT_PENALTY_SCHEDULE,
    DEFAULT_PHI_CAP,
    DEFAULT_TOL_GRAD,
    FW_MAX_ITER,
    FW_STEP_AWAY,
    FW_STEP_OPEN_LOOP,
    FW_TOL,
    MAX_STEP,
    SUBGRADIENT_ITERATIONS,
)
from dvrate.errors import ParseError

log = logging.getLogger(__package__)


def default_penalty_schedule():
    return list(DEFAULT_PENALTY_SCHEDULE)


@dataclass(frozen=True)
class RateOptions:
    tol_grad: float = DEFAULT_TOL_GRAD
    max_iter: int = DEFAULT_MAX_ITER
    phi_cap: float = DEFAULT_PHI_CAP
    penalty_schedule: list[float] = field(default_factory=default_penalty_schedule)
    armijo: float = ARMIJO
    max_step: float = MAX_STEP
    fw_max_iter: int = FW_MAX_ITER
    fw_tol: float = FW_TOL
    fw_step: str = FW_STEP_AWAY
    subgradient_iterations: int = SUBGRADIENT_ITERATIONS

    def __post_init__(self) -> None:
        if self.tol_grad <= 0 or self.phi_cap <= 0 or self.max_step <= 0:
            raise ParseError("tol_grad, phi_cap and max_step must be positive")
        if self.max_iter < 1 or self.fw_max_iter < 1:
            raise ParseError("iteration limits must be at least 1")
        if not self.penalty_schedule or any(r <= 0 for r in self.penalty_schedule):
            raise ParseError("penalty_schedule must be a nonempty list of positive weights")
        if self.fw_step not in (FW_STEP_AWAY, FW_STEP_OPEN_LOOP):
            raise ParseError(f"unknown fw_step {self.fw_step!r}")

    @classmethod
    def from_dict(cls, data: dict | None) -> RateOptions:
        if not data:
            return cls()
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ParseError(f"unknown option keys: {unknown}")
        try:
            kwargs = {}
            for k, v in data.items():
                if k == "penalty_schedule":
                    kwargs[k] = [float(r) for r in v]
                elif k in ("max_iter", "fw_max_iter", "subgradient_iterations"):
                    kwargs[k] = int(v)
                elif k == "fw_step":
                    kwargs[k] = str(v)
                else:
                    kwargs[k] = float(v)
        except (TypeError, ValueError) as e:
            raise ParseError(f"malformed options: {e}") from e
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Config:
    verbose: bool = os.getenv("DVRATE_VERBOSE", "").lower() == "true"
    log_file: str = os.getenv("DVRATE_LOG_FILE", "dvrate.log.txt")
    conf_path: str = os.getenv("DVRATE_CONF_PATH", "conf")
    jobs: int = int(os.getenv("DVRATE_JOBS", "1"))  # 默认单线程, 结果可复现
    out: str = os.getenv("DVRATE_OUT", "")
    tol_grad: float = float(os.getenv("DVRATE_TOL_GRAD", str(DEFAULT_TOL_GRAD)))
    max_iter: int = int(os.getenv("DVRATE_MAX_ITER", str(DEFAULT_MAX_ITER)))
    phi_cap: float = float(os.getenv("DVRATE_PHI_CAP", str(DEFAULT_PHI_CAP)))
    fw_max_iter: int = int(os.getenv("DVRATE_FW_MAX_ITER", str(FW_MAX_ITER)))
    fw_tol: float = float(os.getenv("DVRATE_FW_TOL", str(FW_TOL)))
    fw_step: str = os.getenv("DVRATE_FW_STEP", FW_STEP_AWAY)
    subgradient_iterations: int = int(
        os.getenv("DVRATE_SUBGRADIENT_ITERATIONS", str(SUBGRADIENT_ITERATIONS))
    )
    sentry_dsn: str = os.getenv("DVRATE_SENTRY_DSN", "")
    enable_config_example: bool = False

    def __post_init__(self) -> None:
        if self.jobs < 1:
            self.jobs = 1
        # 保存配置到 config-example.json 文件
        if self.enable_config_example:
            with open("config-example.json", "w") as f:
                data = asdict(self)
                json.dump(data, f, ensure_ascii=False, indent=2)

    @classmethod
    def from_options(cls, options: argparse.Namespace) -> Config:
        config = {}
        if getattr(options, "config", None):
            config = cls.read_from_file(options.config)
        for key, value in vars(options).items():
            if value is not None and key in cls.__dataclass_fields__:
                config[key] = value
        return cls(**config)

    @classmethod
    def convert_value(cls, k, v, type_hints):
        if v is not None and k in type_hints:
            expected_type = type_hints[k]
            try:
                if expected_type is bool:
                    converted_value = False
                    if str(v).lower() == "true":
                        converted_value = True
                else:
                    converted_value = expected_type(v)
                return converted_value
            except (ValueError, TypeError) as e:
                log.warning(f"Error converting {k}:{v} to {expected_type}: {e}")
        return None

    @classmethod
    def read_from_file(cls, config_path: str) -> dict:
        result = {}
        with open(config_path, "rb") as f:
            data = json.load(f)
            type_hints = get_type_hints(cls)

            for k, v in data.items():
                converted_value = cls.convert_value(k, v, type_hints)
                if converted_value is not None:
                    result[k] = converted_value
        return result

    def update_config(self, data):
        type_hints = get_type_hints(self, globals(), locals())

        for k, v in data.items():
            converted_value = self.convert_value(k, v, type_hints)
            if converted_value is not None:
                setattr(self, k, converted_value)

    # 获取设置文件
    def getsettingfile(self):
        if not self.conf_path:
            self.conf_path = "conf"
        return os.path.join(self.conf_path, "setting.json")

    def rate_options(self, overrides: dict | None = None) -> RateOptions:
        data = {
            "tol_grad": self.tol_grad,
            "max_iter": self.max_iter,
            "phi_cap": self.phi_cap,
            "fw_max_iter": self.fw_max_iter,
            "fw_tol": self.fw_tol,
            "fw_step": self.fw_step,
            "subgradient_iterations": self.subgradient_iterations,
        }
        data.update(overrides or {})
        return RateOptions.from_dict(data)
