"""Offline surrogate-gradient training through the unrolled spiking dynamics.

The trainer keeps full-precision shadow weights per layer; every forward
pass projects them onto the even-integer grid first (the deployed network
never sees the shadow values). Backward passes unroll the discrete
dynamics in time: error at a spike flows through the boxcar surrogate of
the threshold nonlinearity, then back through the voltage and current decay
chains, and is truncated after a configurable number of steps. The hard
reset is excluded from the backward graph (treated as pass-through), which
keeps the rule consistent with low-rate regimes.

Two forward regimes exist:

* ``binary`` spikes (optionally with fixed-point integer state): the
  deployment dynamics. The surrogate makes the backward pass a biased but
  usable estimator.
* ``smoothed`` spikes: the threshold step is replaced by the piecewise
  linear ramp whose derivative is exactly the boxcar, and no reset is
  applied. The network is then differentiable almost everywhere and the
  backward pass computes its exact gradient, which is what the
  finite-difference checks verify.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DivergedLoss, EmptyDataset, LabelOutOfRange, ShapeMismatch
from .events import EventStream, SpikeFrameSequence, augment, bin_events
from .network import (
    LayerKind,
    NetworkSpec,
    conv2d,
    conv2d_input_grad,
    conv2d_weight_grad,
    dense_drive,
    sum_pool,
    sum_pool_grad,
)
from .neuron import DECAY_SCALE, STATE_MAX, STATE_MIN, decay_state
from .quantize import quantize_weights
from .rng import substream

# Test instrumentation: called as hook(layer_index, forward_weights) for
# every weight tensor actually used by a training forward pass.
forward_weight_hook: Callable[[int, np.ndarray], None] | None = None


@dataclass(frozen=True)
class SurrogateConfig:
    """Boxcar surrogate: derivative `scale` within half_width of threshold."""

    kind: str = "boxcar"
    half_width: float = 2560.0
    scale: float = 1.0 / 5120.0

    def __post_init__(self) -> None:
        if self.kind != "boxcar":
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if self.half_width <= 0:
            raise ValueError("half_width must be positive")


def surrogate_derivative(u, cfg: SurrogateConfig, u_threshold: float):
    """Boxcar stand-in for the step-function derivative at voltage u."""
    u = np.asarray(u, dtype=np.float64)
    return np.where(np.abs(u - u_threshold) <= cfg.half_width, cfg.scale, 0.0)


def smoothed_spike(u, cfg: SurrogateConfig, u_threshold: float):
    """Ramp whose derivative is the boxcar; used by the differentiable mode."""
    u = np.asarray(u, dtype=np.float64)
    lo = u_threshold - cfg.half_width
    return cfg.scale * np.clip(u - lo, 0.0, 2.0 * cfg.half_width)


@dataclass(frozen=True)
class AugmentConfig:
    xy_jitter_max: int = 8
    rot_jitter_max_deg: float = 10.0
    window_ms: int = 1450


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimizer: str = "adam"
    epochs: int = 10
    batch_size: int = 0            # 0 = full batch
    truncation: int = 64           # steps of temporal credit before cutoff
    loss: str = "spike_count_mse"
    target_true: float = 30.0      # desired spike count, labeled class
    target_false: float = 5.0      # desired spike count, other classes
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    state_mode: str = "int"        # "int" fixed-point or "float"
    spike_mode: str = "binary"     # "binary" or "smoothed"
    quantize_forward: bool = True
    seed: int = 0
    augment: AugmentConfig | None = None
    init_scales: tuple | None = None   # per-layer shadow-init sigmas

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.truncation < 1:
            raise ValueError("truncation must be at least 1")
        if self.state_mode not in ("int", "float"):
            raise ValueError("state_mode must be 'int' or 'float'")
        if self.spike_mode not in ("binary", "smoothed"):
            raise ValueError("spike_mode must be 'binary' or 'smoothed'")
        if self.spike_mode == "smoothed" and self.state_mode != "float":
            raise ValueError("smoothed spikes require float state")
        if not self.quantize_forward and self.state_mode != "float":
            raise ValueError("unquantized forward requires float state")


@dataclass
class ShadowWeights:
    """Full-precision tensors mirroring each layer's weight shape (None for pool)."""

    tensors: list[np.ndarray | None]

    def copy(self) -> "ShadowWeights":
        return ShadowWeights([None if t is None else t.copy() for t in self.tensors])


def init_shadow(net: NetworkSpec, rng: np.random.Generator,
                scales: list[float] | None = None) -> ShadowWeights:
    """Gaussian shadow init; default scale puts early voltages near threshold."""
    tensors: list[np.ndarray | None] = []
    for li, layer in enumerate(net.layers):
        if layer.weights is None:
            tensors.append(None)
            continue
        if scales is not None and scales[li] is not None:
            scale = scales[li]
        else:
            fan_in = layer.weights.shape[1] if layer.kind is LayerKind.DENSE \
                else int(np.prod(layer.weights.shape[1:]))
            scale = layer.params.u_threshold / (4.0 * np.sqrt(fan_in))
        tensors.append(rng.normal(0.0, scale, size=layer.weights.shape))
    return ShadowWeights(tensors)


def spike_count_loss(output_counts: np.ndarray, label: int, n_steps: int,
                     target_true: float = 30.0, target_false: float = 5.0,
                     ) -> tuple[float, np.ndarray]:
    """Squared error between output spike counts and per-class targets.

    Returns (loss, dL/dS) where dL/dS has shape (n_outputs, n_steps); the
    count error is attributed uniformly to every step, which is the exact
    chain rule for a plain sum over steps.
    """
    counts = np.asarray(output_counts, dtype=np.float64)
    if not 0 <= label < counts.shape[0]:
        raise LabelOutOfRange(f"label {label} for {counts.shape[0]} outputs")
    targets = np.full(counts.shape[0], target_false, dtype=np.float64)
    targets[label] = target_true
    diff = targets - counts
    loss = float(np.dot(diff, diff))
    dlds = np.repeat((-2.0 * diff)[:, None], n_steps, axis=1)
    return loss, dlds


@dataclass
class ForwardRecord:
    inputs: list[np.ndarray]        # per layer, (T, B, *in_shape)
    u_pre: list[np.ndarray | None]  # per layer, (T, B, *out_shape); None for pool
    out_spikes: np.ndarray          # (T, B, n_out)
    counts: np.ndarray              # (B, n_out) float


def forward_pass(net: NetworkSpec, shadow: ShadowWeights, frames: np.ndarray,
                 cfg: TrainerConfig) -> ForwardRecord:
    """Run the recorded forward pass on a batch of frame tensors (B,T,2,H,W).

    Layers are processed one at a time over the whole sequence (spikes feed
    strictly forward), so each layer's synaptic drive is a single batched
    operation followed by a cheap per-step state scan.
    """
    if frames.shape[2:] != tuple(net.input_shape):
        raise ShapeMismatch(f"frames {frames.shape[2:]} vs net {net.input_shape}")
    b, t_steps = frames.shape[0], frames.shape[1]
    int_mode = cfg.state_mode == "int"
    dtype = np.int64 if int_mode else np.float64

    weights = []
    for li, layer in enumerate(net.layers):
        if shadow.tensors[li] is None:
            weights.append(None)
            continue
        w = quantize_weights(shadow.tensors[li]) if cfg.quantize_forward \
            else shadow.tensors[li]
        if not int_mode:
            w = np.asarray(w, dtype=np.float64)
        if forward_weight_hook is not None:
            forward_weight_hook(li, w)
        weights.append(w)

    inputs: list[np.ndarray] = []
    u_pre: list[np.ndarray | None] = []
    x_seq = np.ascontiguousarray(frames.transpose(1, 0, *range(2, frames.ndim))
                                 ).astype(dtype)  # (T, B, ...)
    for li, layer in enumerate(net.layers):
        if layer.kind is LayerKind.DENSE:
            x_seq = x_seq.reshape(t_steps, b, -1)
        inputs.append(x_seq)
        merged = x_seq.reshape(t_steps * b, *layer.in_shape)
        if layer.kind is LayerKind.SUM_POOL:
            x_seq = sum_pool(merged, layer.kernel_size, layer.pool_gain) \
                .reshape(t_steps, b, *layer.out_shape)
            u_pre.append(None)
            continue
        if layer.kind is LayerKind.CONV:
            z_seq = conv2d(merged, weights[li], layer.padding)
        else:
            z_seq = dense_drive(merged.reshape(t_steps * b, -1), weights[li])
        z_seq = z_seq.reshape(t_steps, b, *layer.out_shape)

        p = layer.params
        gi = (DECAY_SCALE - p.current_decay) / DECAY_SCALE
        gu = (DECAY_SCALE - p.voltage_decay) / DECAY_SCALE
        i_state = np.zeros((b, *layer.out_shape), dtype=dtype)
        u_state = np.zeros((b, *layer.out_shape), dtype=dtype)
        u_rec = np.empty((t_steps, b, *layer.out_shape), dtype=np.float64)
        s_seq = np.empty((t_steps, b, *layer.out_shape), dtype=dtype)
        for t in range(t_steps):
            if int_mode:
                i_state = np.clip(decay_state(i_state, p.current_decay) + z_seq[t],
                                  STATE_MIN, STATE_MAX)
                u_new = np.clip(decay_state(u_state, p.voltage_decay) + i_state + p.bias,
                                STATE_MIN, STATE_MAX)
            else:
                i_state = gi * i_state + z_seq[t]
                u_new = gu * u_state + i_state + p.bias
            u_rec[t] = u_new
            if cfg.spike_mode == "smoothed":
                s_seq[t] = smoothed_spike(u_new, cfg.surrogate, p.u_threshold)
                u_state = u_new
            else:
                s_seq[t] = (u_new >= p.u_threshold).astype(dtype)
                u_state = np.where(s_seq[t] > 0, 0, u_new)  # hard reset
        u_pre.append(u_rec)
        x_seq = s_seq

    out_spikes = x_seq.reshape(t_steps, b, -1).astype(np.float64)
    counts = out_spikes.sum(axis=0)
    return ForwardRecord(inputs, u_pre, out_spikes, counts)


def bptt_gradients(net: NetworkSpec, shadow: ShadowWeights, frames: np.ndarray,
                   labels: np.ndarray, cfg: TrainerConfig,
                   ) -> tuple[list[np.ndarray | None], float, np.ndarray]:
    """Batch-mean loss gradients w.r.t. the shadow weights.

    Returns (per-layer gradients, mean loss, per-sample output counts).
    Temporal credit is cut at multiples of cfg.truncation: no gradient
    flows from a step to steps in an earlier truncation block.
    """
    rec = forward_pass(net, shadow, frames, cfg)
    b, t_steps = frames.shape[0], frames.shape[1]

    loss_total = 0.0
    g_out = np.empty((t_steps, b, net.n_outputs), dtype=np.float64)
    for bi in range(b):
        loss_i, dlds = spike_count_loss(rec.counts[bi], int(labels[bi]), t_steps,
                                        cfg.target_true, cfg.target_false)
        loss_total += loss_i
        g_out[:, bi, :] = dlds.T / b
    mean_loss = loss_total / b
    if not np.isfinite(mean_loss):
        raise DivergedLoss(f"loss is {mean_loss}")

    grads: list[np.ndarray | None] = [None] * len(net.layers)
    g = g_out  # (T, B, *out_shape of current layer)
    for li in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[li]
        if layer.kind is LayerKind.SUM_POOL:
            merged = g.reshape(t_steps * b, *layer.out_shape)
            g = sum_pool_grad(merged, layer.kernel_size, layer.pool_gain)
            g = g.reshape(t_steps, b, *layer.in_shape)
            continue

        p = layer.params
        gi_f = (DECAY_SCALE - p.current_decay) / DECAY_SCALE
        gu_f = (DECAY_SCALE - p.voltage_decay) / DECAY_SCALE
        g = g.reshape(t_steps, b, *layer.out_shape)
        sg = surrogate_derivative(rec.u_pre[li], cfg.surrogate, p.u_threshold)
        a = g * sg

        g_i = np.zeros_like(a)
        carry_u = np.zeros_like(a[0])
        carry_i = np.zeros_like(a[0])
        for t in range(t_steps - 1, -1, -1):
            if (t + 1) % cfg.truncation == 0:
                carry_u[...] = 0.0
                carry_i[...] = 0.0
            g_u_t = a[t] + carry_u
            g_i_t = g_u_t + carry_i
            g_i[t] = g_i_t
            carry_u = gu_f * g_u_t
            carry_i = gi_f * g_i_t

        w = quantize_weights(shadow.tensors[li]).astype(np.float64) \
            if cfg.quantize_forward else np.asarray(shadow.tensors[li], np.float64)
        x_in = rec.inputs[li]
        if layer.kind is LayerKind.DENSE:
            g2 = g_i.reshape(t_steps * b, -1)
            x2 = x_in.reshape(t_steps * b, -1).astype(np.float64)
            grads[li] = g2.T @ x2
            g = (g2 @ w).reshape(t_steps, b, *layer.in_shape)
        else:
            merged_g = g_i.reshape(t_steps * b, *layer.out_shape)
            merged_x = x_in.reshape(t_steps * b, *layer.in_shape).astype(np.float64)
            grads[li] = conv2d_weight_grad(merged_g, merged_x, layer.padding,
                                           layer.kernel_size)
            g = conv2d_input_grad(merged_g, w, layer.padding)
            g = g.reshape(t_steps, b, *layer.in_shape)

    return grads, mean_loss, rec.counts


class Adam:
    """Adaptive-moment optimizer over a list of tensors (None entries skipped)."""

    def __init__(self, shapes: list[tuple | None], cfg: TrainerConfig) -> None:
        self.cfg = cfg
        self.t = 0
        self.m = [None if s is None else np.zeros(s) for s in shapes]
        self.v = [None if s is None else np.zeros(s) for s in shapes]

    def step(self, shadow: ShadowWeights, grads: list[np.ndarray | None]) -> None:
        c = self.cfg
        self.t += 1
        for i, g in enumerate(grads):
            if g is None:
                continue
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            m_hat = self.m[i] / (1 - c.beta1 ** self.t)
            v_hat = self.v[i] / (1 - c.beta2 ** self.t)
            shadow.tensors[i] = shadow.tensors[i] - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)


@dataclass
class TrainResult:
    shadow: ShadowWeights
    net: NetworkSpec                      # deployed: quantized weights installed
    loss_curve: list[tuple[int, float, float]]  # (epoch, mean loss, train acc)


def deploy(net: NetworkSpec, shadow: ShadowWeights) -> NetworkSpec:
    """Install quantized shadow weights into a copy of the network."""
    out = net.copy()
    for li, layer in enumerate(out.layers):
        if shadow.tensors[li] is not None:
            layer.weights = quantize_weights(shadow.tensors[li])
    return out


def _stack_frames(seqs: list[SpikeFrameSequence]) -> np.ndarray:
    t0 = seqs[0].n_steps
    if any(s.n_steps != t0 for s in seqs):
        raise ShapeMismatch("batch presentations differ in length")
    return np.stack([s.frames for s in seqs])


def train(net: NetworkSpec, data: list[tuple[EventStream, int]],
          cfg: TrainerConfig, shadow: ShadowWeights | None = None,
          dt_us: int = 1000) -> TrainResult:
    """Train shadow weights on labeled event streams.

    Each epoch: (optionally) augment every stream, bin to frames, run the
    quantized forward pass, backpropagate through time, and take one
    optimizer step per batch. Deterministic given cfg.seed.
    """
    if not data:
        raise EmptyDataset("no training samples")
    labels_all = sorted({label for _, label in data})
    if len(labels_all) < 2:
        raise EmptyDataset("need at least 2 classes")

    if shadow is None:
        scales = list(cfg.init_scales) if cfg.init_scales is not None else None
        shadow = init_shadow(net, substream(cfg.seed, "init"), scales)
    else:
        shadow = shadow.copy()
    opt = Adam([None if t is None else t.shape for t in shadow.tensors], cfg)

    n = len(data)
    batch = cfg.batch_size if cfg.batch_size > 0 else n
    curve: list[tuple[int, float, float]] = []
    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, "order", epoch).permutation(n)
        rng_aug = substream(cfg.seed, "augment", epoch)
        epoch_loss = 0.0
        correct = 0
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            seqs, labels = [], []
            for j in idx:
                stream, label = data[int(j)]
                if cfg.augment is not None:
                    stream = augment(stream, rng_aug, cfg.augment.xy_jitter_max,
                                     cfg.augment.rot_jitter_max_deg,
                                     cfg.augment.window_ms)
                seqs.append(bin_events(stream, dt_us))
                labels.append(label)
            frames = _stack_frames(seqs)
            grads, loss, counts = bptt_gradients(net, shadow, frames,
                                                 np.asarray(labels), cfg)
            opt.step(shadow, grads)
            epoch_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(counts, axis=1) == np.asarray(labels)))
        curve.append((epoch, epoch_loss / n, correct / n))

    return TrainResult(shadow, deploy(net, shadow), curve)
