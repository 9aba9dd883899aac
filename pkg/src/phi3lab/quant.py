"""Group-wise symmetric int4 weight quantization and memory footprints."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

INT4_MIN, INT4_MAX = -8, 7
DEFAULT_GROUP_SIZE = 32
DEFAULT_SCALE_BITS = 16
_TINY = float(np.nextafter(0.0, 1.0))


@dataclass(frozen=True, eq=False)
class QuantGroup:
    codes: np.ndarray   # int8 values in [-8, 7]
    scale: float

    def __post_init__(self):
        if self.scale < 0 or not math.isfinite(self.scale):
            raise ValueError(f"scale must be finite and >= 0, got {self.scale}")
        if self.codes.size and (self.codes.min() < INT4_MIN or self.codes.max() > INT4_MAX):
            raise ValueError("codes outside the int4 range")
        if self.scale == 0 and np.any(self.codes):
            raise ValueError("zero scale requires all-zero codes")

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.scale


@dataclass(frozen=True)
class FootprintReport:
    weight_bytes: int
    scale_bytes: int
    total_bytes: int

    @property
    def weight_gib(self) -> float:
        return self.weight_bytes / 2**30

    @property
    def total_gib(self) -> float:
        return self.total_bytes / 2**30


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_int4(w, group_size: int = DEFAULT_GROUP_SIZE) -> list[QuantGroup]:
    """Split ``w`` into groups; each gets ``scale = max|w| / 7`` and rounded codes.

    The last group may be shorter than ``group_size``.
    """
    if group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    w = np.asarray(w, dtype=np.float64).ravel()
    if np.isnan(w).any():
        raise ValueError("NaN in weights")
    if not np.isfinite(w).all():
        raise ValueError("weights must be finite")
    groups = []
    for start in range(0, w.size, group_size):
        chunk = w[start:start + group_size]
        amax = float(np.abs(chunk).max())
        scale = amax / INT4_MAX
        if amax > 0.0 and scale == 0.0:
            # subnormal group: max/7 underflows
            scale = _TINY
        if scale == 0.0:
            codes = np.zeros(chunk.size, dtype=np.int8)
        else:
            codes = np.clip(_round_half_away(chunk / scale), INT4_MIN, INT4_MAX).astype(np.int8)
        groups.append(QuantGroup(codes, scale))
    return groups


def dequantize(groups: list[QuantGroup]) -> np.ndarray:
    if not groups:
        return np.zeros(0)
    return np.concatenate([g.dequantize() for g in groups])


def footprint(
    param_total: int,
    bits_per_weight: int = 4,
    group_size: int | None = DEFAULT_GROUP_SIZE,
    scale_bits: int = DEFAULT_SCALE_BITS,
) -> FootprintReport:
    """Bytes to store ``param_total`` weights plus one scale per group.

    ``group_size=None`` means a single group spanning every weight.
    """
    param_total = int(param_total)
    if param_total < 0 or bits_per_weight < 1 or scale_bits < 0:
        raise ValueError("footprint arguments must be positive")
    if group_size is not None and group_size < 1:
        raise ValueError("group_size must be >= 1")
    weight_bytes = -(-param_total * bits_per_weight // 8)
    if param_total == 0:
        n_groups = 0
    elif group_size is None:
        n_groups = 1
    else:
        n_groups = -(-param_total // group_size)
    scale_bytes = -(-n_groups * scale_bits // 8)
    return FootprintReport(weight_bytes, scale_bytes, weight_bytes + scale_bytes)


def error_stats(w, groups: list[QuantGroup]) -> dict:
    w = np.asarray(w, dtype=np.float64).ravel()
    err = np.abs(w - dequantize(groups))
    return {
        "max_abs_error": float(err.max()) if err.size else 0.0,
        "mean_abs_error": float(err.mean()) if err.size else 0.0,
        "rmse": float(np.sqrt((err**2).mean())) if err.size else 0.0,
    }
