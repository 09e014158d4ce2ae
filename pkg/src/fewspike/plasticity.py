"""Error-triggered online plasticity for the output layer.

The engine keeps two first-order presynaptic traces per input,

    X1[t+1] = alpha1 * X1[t] + impulse * S[t]      (fast)
    X2[t+1] = alpha2 * X2[t] + impulse * S[t]      (slow, alpha2 > alpha1)

whose difference X2 - X1 is the second-order postsynaptic-response kernel
used as the presynaptic factor of the update. Every T steps the engine
compares each output neuron's spike count against its target; when the
error magnitude exceeds an adaptive threshold theta it emits a nonnegative
error event E = C + err (the constant offset C keeps the value storable in
an unsigned trace register) and applies

    dW_j = eta * (E - C) * (X2_j - X1_j)

stochastically rounded onto the even weight grid. Positive error (the
neuron fires less than its target) potentiates; negative error depresses.
Triggering raises theta by a constant and resets the spike count; a quiet
evaluation lowers theta toward its floor.

The same rule is expressible in a generic sum-of-products form (RuleTerm /
PlasticityRule below) so alternative rules can be interpreted with the
same machinery.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import OffsetUnderflow, PresentationTooShort, ShapeMismatch
from .network import LayerKind, LayerSpec
from .neuron import NeuronState, OverflowMode, step_neuron
from .quantize import TRACE_GRID, WEIGHT_GRID, stochastic_round

DEFAULT_ALPHA_FAST = 0.75      # decay 1024 in 12-bit units
DEFAULT_ALPHA_SLOW = 0.96875   # decay 128


@dataclass(frozen=True)
class SoelConfig:
    eta: float = 1.0 / 64.0
    c_offset: int = 64             # must dominate every plausible |err|
    t_interval: int = 32           # error-evaluation period, timesteps
    theta_init: float = 0.0
    theta_inc: float = 1.0
    theta_dec: float = 1.0
    theta_min: float = 0.0
    target_y_active: int = 10      # spikes per window, labeled class
    target_y_inactive: int = 0
    impulse: float = 16.0
    alpha_fast: float = DEFAULT_ALPHA_FAST
    alpha_slow: float = DEFAULT_ALPHA_SLOW
    hardware_faithful: bool = False  # 7-bit stochastically rounded traces

    def __post_init__(self) -> None:
        if self.t_interval < 1:
            raise ValueError("t_interval must be at least 1")
        if self.theta_inc < 0 or self.theta_dec < 0:
            raise ValueError("theta adaptation constants must be nonnegative")
        if not 0.0 <= self.alpha_fast < self.alpha_slow <= 1.0:
            raise ValueError("need 0 <= alpha_fast < alpha_slow <= 1")


@dataclass
class TraceState:
    """Per-presynaptic-neuron trace registers."""

    x1: np.ndarray
    x2: np.ndarray
    alpha1: float = DEFAULT_ALPHA_FAST
    alpha2: float = DEFAULT_ALPHA_SLOW

    @classmethod
    def zeros(cls, n: int, alpha1: float = DEFAULT_ALPHA_FAST,
              alpha2: float = DEFAULT_ALPHA_SLOW) -> "TraceState":
        if not alpha1 < alpha2:
            raise ValueError("alpha2 must exceed alpha1")
        return cls(np.zeros(n), np.zeros(n), alpha1, alpha2)

    @property
    def kernel(self) -> np.ndarray:
        """The second-order presynaptic factor X2 - X1."""
        return self.x2 - self.x1


def update_traces(traces: TraceState, pre_spikes: np.ndarray,
                  impulse: float = 16.0, hardware_faithful: bool = False,
                  rng: np.random.Generator | None = None) -> TraceState:
    """Advance both traces one step; returns a new TraceState.

    In hardware-faithful mode the results are stochastically rounded to the
    7-bit grid [0, 127] (rng required).
    """
    s = np.asarray(pre_spikes, dtype=np.float64)
    x1 = traces.alpha1 * traces.x1 + impulse * s
    x2 = traces.alpha2 * traces.x2 + impulse * s
    if hardware_faithful:
        if rng is None:
            raise ValueError("hardware-faithful trace update needs an rng")
        x1 = stochastic_round(x1, TRACE_GRID, rng).astype(np.float64)
        x2 = stochastic_round(x2, TRACE_GRID, rng).astype(np.float64)
    return TraceState(x1, x2, traces.alpha1, traces.alpha2)


def compute_error(y_target: int, spike_count: int) -> int:
    """Count error: target minus observed spikes."""
    return int(y_target) - int(spike_count)


def error_event(err: int, theta: float, c_offset: int) -> tuple[int, bool]:
    """Threshold the error into a nonnegative event value.

    Triggered iff |err| strictly exceeds theta. Returns (E, triggered) with
    E = C + err on trigger and E = C otherwise.
    """
    if c_offset + err < 0:
        raise OffsetUnderflow(f"C={c_offset} cannot offset err={err}")
    triggered = err > theta or err < -theta
    return (c_offset + err) if triggered else c_offset, triggered


def adapt_threshold(theta: float, triggered: bool, cfg: SoelConfig) -> float:
    """Raise theta on a trigger, otherwise decay it toward the floor."""
    if triggered:
        return theta + cfg.theta_inc
    return max(cfg.theta_min, theta - cfg.theta_dec)


# --- sum-of-products rule interpretation ---

class FactorKind(enum.Enum):
    PRE_X1 = "pre_x1"
    PRE_X2 = "pre_x2"
    POST_ERROR = "post_error"
    CONSTANT = "constant"


@dataclass(frozen=True)
class Factor:
    """One multiplicand: a state variable (or constant) plus an offset."""

    kind: FactorKind
    addend: float = 0.0
    value: float = 0.0  # CONSTANT only

    def evaluate(self, traces: TraceState, post_error: float) -> np.ndarray | float:
        if self.kind is FactorKind.PRE_X1:
            return traces.x1 + self.addend
        if self.kind is FactorKind.PRE_X2:
            return traces.x2 + self.addend
        if self.kind is FactorKind.POST_ERROR:
            return post_error + self.addend
        return self.value + self.addend


@dataclass(frozen=True)
class RuleTerm:
    scale: float
    factors: tuple[Factor, ...]


@dataclass(frozen=True)
class PlasticityRule:
    """Weight update as a sum of scaled factor products."""

    terms: tuple[RuleTerm, ...]

    def __post_init__(self) -> None:
        if not self.terms:
            raise ValueError("a plasticity rule needs at least one term")

    def delta(self, traces: TraceState, post_error: float) -> np.ndarray:
        total = np.zeros_like(traces.x1)
        for term in self.terms:
            acc = np.full_like(traces.x1, term.scale)
            for f in term.factors:
                acc = acc * f.evaluate(traces, post_error)
            total = total + acc
        return total


def soel_rule(eta: float, c_offset: int) -> PlasticityRule:
    """eta * (E - C) * X2  -  eta * (E - C) * X1, i.e. eta * (E - C) * (X2 - X1)."""
    return PlasticityRule((
        RuleTerm(eta, (Factor(FactorKind.POST_ERROR, addend=-c_offset),
                       Factor(FactorKind.PRE_X2))),
        RuleTerm(-eta, (Factor(FactorKind.POST_ERROR, addend=-c_offset),
                        Factor(FactorKind.PRE_X1))),
    ))


def apply_update(weights_row: np.ndarray, e_value: int, traces: TraceState,
                 cfg: SoelConfig, rng: np.random.Generator,
                 rule: PlasticityRule | None = None) -> np.ndarray:
    """Apply one triggered update to a single output neuron's weight row.

    The real-valued delta is added to the row and the result stochastically
    rounded back onto the even 8-bit grid (clamped, hence saturating).
    Rows whose presynaptic kernel is zero are left untouched, as is the
    whole row when E = C.
    """
    rule = rule if rule is not None else soel_rule(cfg.eta, cfg.c_offset)
    delta = rule.delta(traces, float(e_value))
    return stochastic_round(weights_row + delta, WEIGHT_GRID, rng)


@dataclass
class PlasticNeuronState:
    """Per-output-neuron learning state for one plastic layer."""

    spike_count: np.ndarray   # spikes since start or last triggered update
    theta: np.ndarray
    last_e: np.ndarray
    learning: bool = True

    @classmethod
    def fresh(cls, n_out: int, cfg: SoelConfig) -> "PlasticNeuronState":
        return cls(np.zeros(n_out, dtype=np.int64),
                   np.full(n_out, cfg.theta_init, dtype=np.float64),
                   np.zeros(n_out, dtype=np.int64))


@dataclass
class WindowLogRow:
    step: int
    neuron: int
    err: int
    theta: float      # threshold used for this trigger decision
    triggered: bool
    e_value: int
    updates_applied: int  # synapses actually changed by this event


WINDOW_LOG_HEADER = ["step", "neuron", "err", "theta", "triggered", "E", "updates_applied"]


def window_log_csv(rows: list[WindowLogRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(WINDOW_LOG_HEADER)
    for r in rows:
        writer.writerow([r.step, r.neuron, r.err, repr(r.theta),
                         int(r.triggered), r.e_value, r.updates_applied])
    return buf.getvalue()


@dataclass
class PresentResult:
    weights: np.ndarray
    log: list[WindowLogRow]
    state: PlasticNeuronState
    output_spikes: np.ndarray   # (T, n_out)
    update_events: int          # triggered (neuron, window) pairs


def soel_present(layer: LayerSpec, feature_spikes: np.ndarray, label: int,
                 cfg: SoelConfig, rng: np.random.Generator,
                 plastic_state: PlasticNeuronState | None = None,
                 learning: bool = True,
                 overflow: OverflowMode = OverflowMode.STRICT) -> PresentResult:
    """Present one feature-spike sequence to a plastic dense layer.

    Steps the layer's neurons on every feature vector; every t_interval
    steps each output neuron's spike count is compared against its target
    (target_y_active for the labeled class, target_y_inactive otherwise).
    A triggered neuron gets its weight row updated with the end-of-window
    trace values, its count reset, and its threshold raised; quiet neurons
    have their threshold lowered. Membrane state always starts from zero;
    pass plastic_state to carry thresholds across presentations.
    """
    if layer.kind is not LayerKind.DENSE:
        raise ShapeMismatch("plasticity runs on a dense layer")
    feature_spikes = np.asarray(feature_spikes)
    t_steps, n_pre = feature_spikes.shape
    if n_pre != layer.weights.shape[1]:
        raise ShapeMismatch(f"{n_pre} features vs {layer.weights.shape[1]} synapses")
    if learning and t_steps < cfg.t_interval:
        raise PresentationTooShort(
            f"{t_steps} steps < evaluation interval {cfg.t_interval}")

    n_out = layer.weights.shape[0]
    weights = layer.weights.copy()
    pstate = plastic_state if plastic_state is not None \
        else PlasticNeuronState.fresh(n_out, cfg)
    pstate.spike_count = np.zeros(n_out, dtype=np.int64)  # new presentation
    traces = TraceState.zeros(n_pre, cfg.alpha_fast, cfg.alpha_slow)
    neuron_state = NeuronState.zeros((n_out,))
    rule = soel_rule(cfg.eta, cfg.c_offset)

    log: list[WindowLogRow] = []
    out_spikes = np.zeros((t_steps, n_out), dtype=np.int64)
    update_events = 0
    for t in range(t_steps):
        x = feature_spikes[t].astype(np.int64)
        if learning:
            traces = update_traces(traces, x, cfg.impulse,
                                   cfg.hardware_faithful, rng)
        z = weights @ x
        neuron_state, spikes = step_neuron(neuron_state, layer.params, z, overflow)
        out_spikes[t] = spikes
        pstate.spike_count += spikes

        if learning and (t + 1) % cfg.t_interval == 0:
            for i in range(n_out):
                target = cfg.target_y_active if i == label else cfg.target_y_inactive
                err = compute_error(target, int(pstate.spike_count[i]))
                theta_used = float(pstate.theta[i])
                e_value, triggered = error_event(err, theta_used, cfg.c_offset)
                changed = 0
                if triggered:
                    new_row = apply_update(weights[i], e_value, traces, cfg, rng, rule)
                    changed = int(np.count_nonzero(new_row != weights[i]))
                    weights[i] = new_row
                    pstate.spike_count[i] = 0
                    update_events += 1
                pstate.last_e[i] = e_value
                pstate.theta[i] = adapt_threshold(theta_used, triggered, cfg)
                log.append(WindowLogRow(t + 1, i, err, theta_used, triggered,
                                        e_value, changed))

    return PresentResult(weights, log, pstate, out_spikes, update_events)


def sgd_baseline_present(layer: LayerSpec, feature_spikes: np.ndarray, label: int,
                         cfg: SoelConfig, rng: np.random.Generator,
                         overflow: OverflowMode = OverflowMode.STRICT,
                         ) -> tuple[np.ndarray, int]:
    """Per-timestep dense update baseline on an identical presentation.

    Every output neuron updates at every step with the instantaneous error
    (per-step target rate minus the emitted spike) times the trace kernel.
    Returns (weights, update_events) with one event per neuron per step.
    """
    feature_spikes = np.asarray(feature_spikes)
    t_steps, n_pre = feature_spikes.shape
    n_out = layer.weights.shape[0]
    weights = layer.weights.copy()
    traces = TraceState.zeros(n_pre, cfg.alpha_fast, cfg.alpha_slow)
    neuron_state = NeuronState.zeros((n_out,))
    rate = np.full(n_out, cfg.target_y_inactive / cfg.t_interval)
    rate[label] = cfg.target_y_active / cfg.t_interval

    events = 0
    for t in range(t_steps):
        x = feature_spikes[t].astype(np.int64)
        traces = update_traces(traces, x, cfg.impulse, cfg.hardware_faithful, rng)
        z = weights @ x
        neuron_state, spikes = step_neuron(neuron_state, layer.params, z, overflow)
        err = rate - spikes
        delta = cfg.eta * err[:, None] * traces.kernel[None, :]
        weights = stochastic_round(weights + delta, WEIGHT_GRID, rng)
        events += n_out
    return weights, events
