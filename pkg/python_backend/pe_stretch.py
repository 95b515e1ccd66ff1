"""
Positional-embedding stretching.

linear: every output position reads source coordinate pos / ratio.
kps:    the first `keep` rows are copied unchanged; later positions read
        keep + (pos - keep) / ratio, so the preserved prefix is not re-read
        and the table grows to keep + (L - keep) * ratio rows.
Both blend the two neighbouring source rows by the fractional part of the
coordinate; the upper neighbour is clamped to the last source row.
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np

from numerics import ContractViolation
from encoders import DualEncoder, PositionalTable

logger = logging.getLogger(__name__)

STRETCH_MODES = ("linear", "kps")
DEFAULT_KEEP = 20


@dataclass(frozen=True)
class StretchSpec:
    mode: str
    ratio: float
    keep: int = DEFAULT_KEEP

    def validate(self, source_len: int) -> "StretchSpec":
        if self.mode not in STRETCH_MODES:
            raise ContractViolation(f"stretch mode must be one of {STRETCH_MODES}, got {self.mode!r}")
        if not self.ratio >= 1:
            raise ContractViolation(f"stretch ratio must be >= 1, got {self.ratio}")
        if self.mode == "kps" and not 0 < self.keep < source_len:
            raise ContractViolation(f"keep must satisfy 0 < keep < {source_len}, got {self.keep}")
        return self

    def target_length(self, source_len: int) -> int:
        if self.mode == "linear":
            return int(math.floor(source_len * self.ratio))
        return self.keep + int(math.floor((source_len - self.keep) * self.ratio))


def source_coordinates(spec: StretchSpec, source_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per output position: the source coordinate s and the blend weight alpha = frac(s)."""
    spec.validate(source_len)
    positions = range(spec.target_length(source_len))
    coords, alphas = [], []
    for pos in positions:
        if spec.mode == "linear":
            coords.append(pos / spec.ratio)
            alphas.append((pos % spec.ratio) / spec.ratio)
        elif pos < spec.keep:
            coords.append(float(pos))
            alphas.append(0.0)
        else:
            offset = pos - spec.keep
            coords.append(spec.keep + offset / spec.ratio)
            alphas.append((offset % spec.ratio) / spec.ratio)
    return np.array(coords, dtype=np.float64), np.array(alphas, dtype=np.float64)


def _interpolate(table: np.ndarray, coords: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    last = table.shape[0] - 1
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(np.ceil(coords).astype(np.int64), last)
    source = table.astype(np.float64)
    a = alphas[:, None]
    return ((1.0 - a) * source[lo] + a * source[hi]).astype(table.dtype)


def linear_stretch(pe: PositionalTable, ratio: float) -> PositionalTable:
    """Fixed-ratio interpolation of the whole table to floor(L * ratio) rows."""
    spec = StretchSpec("linear", ratio).validate(pe.rows)
    coords, alphas = source_coordinates(spec, pe.rows)
    out = _interpolate(pe.table, coords, alphas)
    logger.info("Linear stretch %d -> %d rows (ratio %g)", pe.rows, out.shape[0], ratio)
    return PositionalTable(out, trainable=True)


def kps_stretch(pe: PositionalTable, keep: int = DEFAULT_KEEP, ratio: float = 4.0) -> PositionalTable:
    """Keep the first `keep` rows bit-exact and interpolate the rest by `ratio`."""
    spec = StretchSpec("kps", ratio, keep).validate(pe.rows)
    coords, alphas = source_coordinates(spec, pe.rows)
    out = _interpolate(pe.table, coords, alphas)
    out[:keep] = pe.table[:keep]
    logger.info("Knowledge-preserved stretch %d -> %d rows (keep %d, ratio %g)",
                pe.rows, out.shape[0], keep, ratio)
    return PositionalTable(out, trainable=True)


def apply_stretch(pe: PositionalTable, spec: StretchSpec) -> PositionalTable:
    if spec.mode == "linear":
        return linear_stretch(pe, spec.ratio)
    if spec.mode == "kps":
        return kps_stretch(pe, spec.keep, spec.ratio)
    raise ContractViolation(f"stretch mode must be one of {STRETCH_MODES}, got {spec.mode!r}")


def stretch_model(model: DualEncoder, spec: StretchSpec) -> DualEncoder:
    """Copy of the model with its text positional table stretched (and still trainable)."""
    return model.with_positional(apply_stretch(model.positional, spec), origin=spec.mode)


def stretch_summary(source: PositionalTable, stretched: PositionalTable, spec: StretchSpec) -> Dict[str, Any]:
    """Compare a stretched table against the table it was built from."""
    preserved = 0
    for i in range(min(source.rows, stretched.rows)):
        if not np.array_equal(source.table[i], stretched.table[i]):
            break
        preserved += 1

    coords, _ = source_coordinates(spec, source.rows)
    nearest = np.minimum(np.rint(coords).astype(np.int64), source.rows - 1)
    a = stretched.table.astype(np.float64)
    b = source.table.astype(np.float64)[nearest]
    denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    cosines = np.sum(a * b, axis=1) / np.where(denom > 0, denom, 1.0)

    return {
        "mode": spec.mode,
        "ratio": float(spec.ratio),
        "keep": int(spec.keep) if spec.mode == "kps" else None,
        "sourceLength": int(source.rows),
        "targetLength": int(stretched.rows),
        "preservedRows": int(preserved),
        "meanNearestCosine": round(float(np.mean(cosines)), 6),
    }
