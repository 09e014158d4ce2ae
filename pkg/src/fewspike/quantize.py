"""Weight and trace grids, deterministic and stochastic rounding.

Deployed synaptic weights live on the even-integer grid {-256, -254, ...,
254} (8-bit signed, step 2). Hardware-faithful traces live on the 7-bit
grid {0, ..., 127}. Deterministic quantization is used when projecting
full-precision shadow weights for a forward pass; stochastic rounding is
used for online updates so that the expected update equals the real-valued
one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIGHT_STEP = 2
WEIGHT_MIN = -256
WEIGHT_MAX = 254

TRACE_MIN = 0
TRACE_MAX = 127


@dataclass(frozen=True)
class Grid:
    """Uniform clamped grid: points lo, lo+step, ..., hi."""

    step: int
    lo: int
    hi: int


WEIGHT_GRID = Grid(step=WEIGHT_STEP, lo=WEIGHT_MIN, hi=WEIGHT_MAX)
TRACE_GRID = Grid(step=1, lo=TRACE_MIN, hi=TRACE_MAX)


def quantize_weights(shadow: np.ndarray) -> np.ndarray:
    """Project full-precision weights onto the even 8-bit grid.

    Each value maps to clamp(round_half_to_even(w / 2) * 2, -256, 254).
    """
    w = np.asarray(shadow, dtype=np.float64)
    q = np.rint(w / WEIGHT_STEP) * WEIGHT_STEP
    return np.clip(q, WEIGHT_MIN, WEIGHT_MAX).astype(np.int64)


def stochastic_round(values: np.ndarray, grid: Grid, rng: np.random.Generator) -> np.ndarray:
    """Round each value to a neighboring grid point, clamped to the grid.

    The lower point is kept with probability proportional to closeness, so
    the expectation over the rng equals clamp(value). Values already on the
    grid are returned unchanged.
    """
    v = np.clip(np.asarray(values, dtype=np.float64), grid.lo, grid.hi)
    q = (v - grid.lo) / grid.step
    low = np.floor(q)
    frac = q - low
    up = rng.random(size=v.shape) < frac
    return (grid.lo + (low + up) * grid.step).astype(np.int64)
