#!/usr/bin/env python3
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from fractions import Fraction
from itertools import combinations_with_replacement

import numpy as np
from scipy.stats import norm

from dvrate.const import CONFIDENCE, STOCHASTIC_TOL

log = logging.getLogger(__package__)


### HELP FUNCTION ###
def as_measure(mu, dim: int | None = None, tol: float = STOCHASTIC_TOL) -> np.ndarray:
    """Validate a probability vector and return it as a float array."""
    arr = np.asarray(mu, dtype=float)
    if arr.ndim != 1:
        raise ValueError("a measure must be a vector")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"measure has length {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)) or np.any(arr < -tol):
        raise ValueError("measure entries must be finite and nonnegative")
    if abs(arr.sum() - 1.0) > max(tol, 1e-9):
        raise ValueError(f"measure sums to {arr.sum()!r}, not 1")
    return np.clip(arr, 0.0, None)


def neg_log(p: float) -> float:
    # 0 maps to +inf; floats with math.inf give the total order we need
    if p <= 0.0:
        return math.inf
    return -math.log(p)


def safe_exp_neg(n: float, rate: float) -> float:
    if rate == math.inf:
        return 0.0
    return math.exp(-n * rate)


def wilson_interval(successes: int, samples: int, level: float = CONFIDENCE):
    if samples <= 0:
        raise ValueError("samples must be positive")
    z = float(norm.ppf(0.5 + level / 2.0))
    p = successes / samples
    denom = 1.0 + z * z / samples
    center = (p + z * z / (2.0 * samples)) / denom
    half = z * math.sqrt(p * (1.0 - p) / samples + z * z / (4.0 * samples * samples)) / denom
    low = max(0.0, min(p, center - half))
    high = min(1.0, max(p, center + half))
    return low, high


def compositions(total: int, parts: int) -> np.ndarray:
    """All count vectors of length ``parts`` summing to ``total``.

    Rows come in the order of ``combinations_with_replacement``, which is
    deterministic, so row indices can be used as DP keys.
    """
    rows = []
    for combo in combinations_with_replacement(range(parts), total):
        counts = [0] * parts
        for s in combo:
            counts[s] += 1
        rows.append(counts)
    if not rows:
        return np.zeros((0, parts), dtype=np.int64)
    return np.array(rows, dtype=np.int64)


# 深拷贝把敏感数据设置为*
def deepcopy_data_no_sensitive_info(data, fields_to_anonymize=None):
    if fields_to_anonymize is None:
        fields_to_anonymize = ["sentry_dsn"]

    copy_data = copy.deepcopy(data)
    if isinstance(copy_data, dict):
        for field in fields_to_anonymize:
            if copy_data.get(field):
                copy_data[field] = "******"
    else:
        for field in fields_to_anonymize:
            if getattr(copy_data, field, None):
                setattr(copy_data, field, "******")
    return copy_data


def to_jsonable(value):
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, np.floating | float):
        v = float(value)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return value


def dumps(data) -> str:
    return json.dumps(to_jsonable(data), ensure_ascii=False, indent=2, sort_keys=True)


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: to_jsonable(row.get(k)) for k in columns})
    return buf.getvalue()
