"""Index configuration: a plain key=value file plus command-line overrides.

Numeric keys accept "auto" where a value can be derived from the dataset
size; `resolve_params` turns a config and (n, d, c) into the concrete
parameter record that gets printed and stored with every index.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from .core_math import next_power_of_two
from .errors import InfeasibleParameters, InputError, MalformedRecord

__all__ = ["IndexConfig", "load_config", "parse_config_text", "resolve_params"]

AUTO = "auto"


@dataclass(frozen=True)
class IndexConfig:
    b: int = 2
    m: object = 2           # mid dimension, or "auto" for kappa2 * ln n * ln ln n
    m1: object = AUTO       # stage-1 output dimension, or "auto"
    kappa1: float = 1.0
    kappa2: float = 1.0
    eps_A: object = 0.2     # or "auto": ln(n) ** (-beta / 2)
    eps_B: object = 0.2     # or "auto": ln(n) ** (-gamma / 2)
    gamma: float = 0.5
    beta: float = 0.25
    w: object = AUTO        # ball radius, or "auto": max(set_radius, w_min)
    w_min: float = 3.0
    delta: object = AUTO
    N: object = AUTO
    proj_mode: str = "subsampled"
    proj_s: int = 2
    eps_scale: float = 4.0  # per-level splitter tolerance is eps_scale / sqrt(level output dim)
    id_cap: int = 1 << 20
    max_resamples: int = 16
    seed: int = 0

    def replace(self, **kw) -> "IndexConfig":
        return _coerce(dataclasses.replace(self, **kw))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(IndexConfig)}
_INT_KEYS = {"b", "m", "m1", "N", "proj_s", "id_cap", "max_resamples", "seed"}
_STR_KEYS = {"proj_mode"}
_AUTO_KEYS = {"m", "m1", "eps_A", "eps_B", "w", "delta", "N"}


def _coerce_value(key, value):
    if key not in _FIELDS:
        raise InputError(f"unknown config key {key!r}")
    if key in _STR_KEYS:
        if value not in ("full", "subsampled"):
            raise InputError(f"proj_mode must be 'full' or 'subsampled', got {value!r}")
        return value
    if isinstance(value, str):
        v = value.strip()
        if v.lower() == AUTO:
            if key not in _AUTO_KEYS:
                raise InputError(f"config key {key!r} does not accept 'auto'")
            return AUTO
        try:
            value = int(v) if key in _INT_KEYS else float(v)
        except ValueError:
            raise InputError(f"config key {key!r}: cannot parse {value!r}") from None
    if key in _INT_KEYS:
        if float(value) != int(value):
            raise InputError(f"config key {key!r} must be an integer")
        return int(value)
    return float(value)


def _coerce(cfg: IndexConfig) -> IndexConfig:
    vals = {k: _coerce_value(k, getattr(cfg, k)) for k in _FIELDS}
    return IndexConfig(**vals)


def parse_config_text(text: str, base: IndexConfig = None) -> IndexConfig:
    """Parse ``key = value`` lines; '#' starts a comment."""
    vals = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedRecord(f"config line {lineno}: expected key = value", record=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        vals[key] = _coerce_value(key, value)
    return (base or IndexConfig()).replace(**vals)


def load_config(path) -> IndexConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None


def resolve_params(cfg: IndexConfig, n: int, d: int, c: float) -> dict:
    """Concrete dimensions, tolerances and radii for a dataset of n points in R^d."""
    from .tensor_index import set_radius  # local import keeps config importable on its own

    if c <= 1:
        raise InputError(f"approximation factor must exceed 1, got {c}")
    if n < 1 or d < 1:
        raise InputError("dataset must be non-empty with positive dimension")
    ln_n = math.log(max(n, 3))
    d_pad = next_power_of_two(d)
    eps_A = ln_n ** (-cfg.beta / 2) if cfg.eps_A == AUTO else cfg.eps_A
    eps_B = ln_n ** (-cfg.gamma / 2) if cfg.eps_B == AUTO else cfg.eps_B
    if not 0 <= eps_A < 1:
        raise InfeasibleParameters(f"eps_A={eps_A} must lie in [0, 1)", stage="config")
    b = cfg.b
    if b < 1 or b & (b - 1):
        raise InfeasibleParameters(f"b={b} must be a power of two", stage="config")

    if cfg.m1 == AUTO:
        m1 = next_power_of_two(math.ceil(cfg.kappa1 * eps_A ** -2 * math.log(max(n, 2) * d) ** 2)) \
            if eps_A > 0 else d_pad
    else:
        m1 = cfg.m1
    m1 = min(m1, d_pad)
    if cfg.m == AUTO:
        m = next_power_of_two(math.ceil(cfg.kappa2 * ln_n * math.log(ln_n)))
    else:
        m = cfg.m
    m = min(m, m1)
    for name, v in (("m1", m1), ("m", m)):
        if v < 1 or v & (v - 1):
            raise InfeasibleParameters(f"{name}={v} must be a power of two", stage="config")
    if m < b:
        raise InfeasibleParameters(f"mid dimension m={m} is below the subspace dimension b={b}",
                                   stage="config")
    stages = int(m1 < d_pad) + int(m < m1)
    c_mid = c * (1 - eps_A) ** stages
    if c_mid <= 1:
        raise InfeasibleParameters(
            f"after {stages} reduction stage(s) the approximation factor {c_mid:.4g} is <= 1; "
            "lower eps_A", stage="config")
    w_formula = set_radius(m, max(n, 2), c_mid)
    w = max(w_formula, cfg.w_min) if cfg.w == AUTO else cfg.w
    return {
        "n": n, "d": d, "d_pad": d_pad, "c": c,
        "m1": m1, "m": m, "b": b,
        "stage1": m1 < d_pad, "stage2": m < m1,
        "c1": c * (1 - eps_A) if m1 < d_pad else c, "c_mid": c_mid,
        "eps_A": eps_A, "eps_B": eps_B, "gamma": cfg.gamma, "beta": cfg.beta,
        "kappa1": cfg.kappa1, "kappa2": cfg.kappa2,
        "w": w, "w_formula": w_formula,
        "delta": None if cfg.delta == AUTO else cfg.delta,
        "N": None if cfg.N == AUTO else cfg.N,
        "proj_mode": cfg.proj_mode, "proj_s": cfg.proj_s, "eps_scale": cfg.eps_scale,
        "id_cap": cfg.id_cap, "max_resamples": cfg.max_resamples, "seed": cfg.seed,
    }
