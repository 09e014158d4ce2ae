"""Fixed-point current-based leaky integrate-and-fire dynamics.

States are signed 24-bit integers. Decays are 12-bit constants d in
[0, 4096]; one step multiplies a state by (4096 - d) / 4096, evaluated in
integer arithmetic with rounding toward zero (sign-symmetric floor). Per
step, with weighted input z and bias b:

    I' = decay(I, current_decay) + z
    U' = decay(U, voltage_decay) + I' + b
    spike = 1  iff  U' >= u_threshold

In HARD_RESET mode a spike zeroes the stored voltage; in SOFT_SUBTRACT mode
a decaying reset register R accumulates spikes and u_threshold * R is
subtracted from the voltage instead.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DecayOutOfRange, Overflow

DECAY_SCALE = 4096
STATE_BITS = 24
STATE_MAX = 2 ** (STATE_BITS - 1) - 1
STATE_MIN = -(2 ** (STATE_BITS - 1))

DEFAULT_THRESHOLD = 80 * 2**6  # 5120
DEFAULT_CURRENT_DECAY = 1024   # factor 0.75 per step
DEFAULT_VOLTAGE_DECAY = 128    # factor 0.96875 per step


class ResetMode(enum.Enum):
    HARD_RESET = "hard_reset"
    SOFT_SUBTRACT = "soft_subtract"


class OverflowMode(enum.Enum):
    STRICT = "strict"      # raise Overflow when a state leaves 24-bit range
    SATURATE = "saturate"  # clamp to the 24-bit range


@dataclass(frozen=True)
class NeuronParams:
    u_threshold: int = DEFAULT_THRESHOLD
    current_decay: int = DEFAULT_CURRENT_DECAY
    voltage_decay: int = DEFAULT_VOLTAGE_DECAY
    refractory_decay: int = DEFAULT_VOLTAGE_DECAY  # SOFT_SUBTRACT mode only
    bias: int = 0
    refractory_mode: ResetMode = ResetMode.HARD_RESET
    dt_us: int = 1000

    def __post_init__(self) -> None:
        for d in (self.current_decay, self.voltage_decay, self.refractory_decay):
            if not 0 <= d <= DECAY_SCALE:
                raise DecayOutOfRange(f"decay {d} outside [0, {DECAY_SCALE}]")
        if self.u_threshold <= 0:
            raise ValueError("u_threshold must be positive")


@dataclass
class NeuronState:
    """Per-neuron dynamic state; arrays share one shape."""

    current: np.ndarray
    voltage: np.ndarray
    refractory: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "NeuronState":
        return cls(np.zeros(shape, dtype=np.int64),
                   np.zeros(shape, dtype=np.int64),
                   np.zeros(shape, dtype=np.int64))

    def copy(self) -> "NeuronState":
        return NeuronState(self.current.copy(), self.voltage.copy(),
                           self.refractory.copy())


def decay_factor(decay: int) -> float:
    """Per-step multiplicative retention factor (4096 - decay) / 4096."""
    if not 0 <= decay <= DECAY_SCALE:
        raise DecayOutOfRange(f"decay {decay} outside [0, {DECAY_SCALE}]")
    return (DECAY_SCALE - decay) / DECAY_SCALE


def decay_state(state: np.ndarray, decay: int) -> np.ndarray:
    """Apply one decay step in integer arithmetic, rounding toward zero."""
    if not 0 <= decay <= DECAY_SCALE:
        raise DecayOutOfRange(f"decay {decay} outside [0, {DECAY_SCALE}]")
    state = np.asarray(state, dtype=np.int64)
    mag = (np.abs(state) * (DECAY_SCALE - decay)) // DECAY_SCALE
    return np.sign(state) * mag


def _check_range(arr: np.ndarray, mode: OverflowMode) -> np.ndarray:
    if mode is OverflowMode.STRICT:
        if np.any(arr > STATE_MAX) or np.any(arr < STATE_MIN):
            raise Overflow("state outside signed 24-bit range")
        return arr
    return np.clip(arr, STATE_MIN, STATE_MAX)


def step_neuron_full(state: NeuronState, params: NeuronParams,
                     weighted_input: np.ndarray,
                     overflow: OverflowMode = OverflowMode.STRICT,
                     ) -> tuple[NeuronState, np.ndarray, np.ndarray]:
    """Advance one timestep; returns (state', spikes, pre-reset voltage).

    The pre-reset voltage is the value compared against the threshold; the
    training recorder needs it even in HARD_RESET mode where the stored
    voltage is zeroed on spiking steps.
    """
    i_new = decay_state(state.current, params.current_decay) + np.asarray(weighted_input, dtype=np.int64)
    i_new = _check_range(i_new, overflow)
    u_pre = decay_state(state.voltage, params.voltage_decay) + i_new + params.bias
    u_pre = _check_range(u_pre, overflow)
    spikes = (u_pre >= params.u_threshold).astype(np.int64)

    if params.refractory_mode is ResetMode.HARD_RESET:
        u_post = np.where(spikes == 1, 0, u_pre)
        r_new = state.refractory
    else:
        r_new = decay_state(state.refractory, params.refractory_decay) + spikes
        u_post = _check_range(u_pre - params.u_threshold * r_new, overflow)
    return NeuronState(i_new, u_post, r_new), spikes, u_pre


def step_neuron(state: NeuronState, params: NeuronParams,
                weighted_input: np.ndarray,
                overflow: OverflowMode = OverflowMode.STRICT,
                ) -> tuple[NeuronState, np.ndarray]:
    """Advance one timestep; returns (state', spikes)."""
    new_state, spikes, _ = step_neuron_full(state, params, weighted_input, overflow)
    return new_state, spikes
