"""Layer graph, quantized forward inference, and checkpoint files.

Layers are sum-pooling (stateless, passes window sums through as synaptic
drive), convolution (stride 1, optional zero padding), or dense. Conv and
dense layers hold even-integer weights and step their neurons with the
fixed-point dynamics from ``neuron``. A network is an ordered layer list
ending in a dense layer; at most one layer (the output) may be plastic.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field, replace
from math import prod

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckpointError, ShapeMismatch
from .events import SpikeFrameSequence
from .neuron import NeuronParams, NeuronState, OverflowMode, ResetMode, step_neuron
from .quantize import WEIGHT_MAX, WEIGHT_MIN


class LayerKind(enum.Enum):
    SUM_POOL = "sum_pool"
    CONV = "conv"
    DENSE = "dense"


# --- batched tensor primitives (shared with the trainer) ---
#
# Convolutions run as im2col + float64 GEMM. All quantities here are
# integers of magnitude far below 2**53, so the float path is exact; integer
# inputs come back as int64.


def _im2col(x: np.ndarray, k: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Extract k x k patches; x (B,C,H,W) -> contiguous (B, H'*W', C*k*k)."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (B,C,H',W',k,k)
    b, c, ho, wo = win.shape[:4]
    patches = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * k * k)
    return np.ascontiguousarray(patches, dtype=np.float64), ho, wo


def dense_drive(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Dense synaptic drive x @ w.T with the same exact float64 GEMM trick."""
    int_in = np.issubdtype(x.dtype, np.integer) and np.issubdtype(w.dtype, np.integer)
    out = np.asarray(x, dtype=np.float64) @ np.asarray(w, dtype=np.float64).T
    return np.rint(out).astype(np.int64) if int_in else out


def conv2d(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """Stride-1 2d convolution; x (B,Ci,H,W), w (Co,Ci,k,k) -> (B,Co,H',W')."""
    int_in = np.issubdtype(x.dtype, np.integer) and np.issubdtype(w.dtype, np.integer)
    k = w.shape[-1]
    patches, ho, wo = _im2col(x, k, pad)
    w_flat = np.asarray(w, dtype=np.float64).reshape(w.shape[0], -1)
    out = patches @ w_flat.T                      # (B, H'*W', Co)
    out = out.transpose(0, 2, 1).reshape(x.shape[0], w.shape[0], ho, wo)
    return np.rint(out).astype(np.int64) if int_in else out


def conv2d_input_grad(g: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """Gradient of conv2d w.r.t. its input; g (B,Co,H',W') -> (B,Ci,H,W)."""
    k = w.shape[-1]
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d(g, wt, k - 1 - pad)


def conv2d_weight_grad(g: np.ndarray, x: np.ndarray, pad: int, k: int) -> np.ndarray:
    """Gradient of conv2d w.r.t. its kernel; -> (Co,Ci,k,k)."""
    patches, ho, wo = _im2col(x, k, pad)
    co = g.shape[1]
    g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1).reshape(-1, co),
                              dtype=np.float64)
    gw = g2.T @ patches.reshape(-1, patches.shape[-1])
    return gw.reshape(co, x.shape[1], k, k)


def sum_pool(x: np.ndarray, k: int, gain: int = 1) -> np.ndarray:
    """Non-overlapping k x k window sums; x (B,C,H,W) -> (B,C,H/k,W/k)."""
    b, c, h, w = x.shape
    out = x.reshape(b, c, h // k, k, w // k, k).sum(axis=(3, 5))
    return out if gain == 1 else out * gain


def sum_pool_grad(g: np.ndarray, k: int, gain: int = 1) -> np.ndarray:
    out = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
    return out if gain == 1 else out * gain


@dataclass
class LayerSpec:
    kind: LayerKind
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kernel_size: int = 0
    zero_padding: bool = False
    pool_gain: int = 1
    params: NeuronParams | None = None
    weights: np.ndarray | None = field(default=None, repr=False)
    plastic: bool = False

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2 if self.zero_padding else 0

    @property
    def n_neurons(self) -> int:
        return prod(self.out_shape)

    def copy(self) -> "LayerSpec":
        w = None if self.weights is None else self.weights.copy()
        return replace(self, weights=w)


def make_pool(in_shape: tuple[int, ...], kernel: int, gain: int = 1) -> LayerSpec:
    c, h, w = in_shape
    if h % kernel or w % kernel:
        raise ShapeMismatch(f"pool {kernel} does not tile {in_shape}")
    return LayerSpec(LayerKind.SUM_POOL, in_shape, (c, h // kernel, w // kernel),
                     kernel_size=kernel, pool_gain=gain)


def make_conv(in_shape: tuple[int, ...], out_channels: int, kernel: int,
              params: NeuronParams, zero_padding: bool = True,
              weights: np.ndarray | None = None) -> LayerSpec:
    c, h, w = in_shape
    pad = (kernel - 1) // 2 if zero_padding else 0
    out_shape = (out_channels, h + 2 * pad - kernel + 1, w + 2 * pad - kernel + 1)
    if weights is None:
        weights = np.zeros((out_channels, c, kernel, kernel), dtype=np.int64)
    if weights.shape != (out_channels, c, kernel, kernel):
        raise ShapeMismatch("conv weight shape mismatch")
    return LayerSpec(LayerKind.CONV, in_shape, out_shape, kernel_size=kernel,
                     zero_padding=zero_padding, params=params, weights=weights)


def make_dense(in_shape: tuple[int, ...], n_out: int, params: NeuronParams,
               weights: np.ndarray | None = None, plastic: bool = False) -> LayerSpec:
    n_in = prod(in_shape)
    if weights is None:
        weights = np.zeros((n_out, n_in), dtype=np.int64)
    if weights.shape != (n_out, n_in):
        raise ShapeMismatch("dense weight shape mismatch")
    return LayerSpec(LayerKind.DENSE, in_shape, (n_out,), params=params,
                     weights=weights, plastic=plastic)


@dataclass
class NetworkSpec:
    input_shape: tuple[int, ...]  # (2, H, W)
    layers: list[LayerSpec]

    def __post_init__(self) -> None:
        shape = tuple(self.input_shape)
        for layer in self.layers:
            expected = layer.in_shape if layer.kind is not LayerKind.DENSE else layer.in_shape
            if layer.kind is LayerKind.DENSE:
                if prod(shape) != prod(layer.in_shape):
                    raise ShapeMismatch(f"dense expects {layer.in_shape}, got {shape}")
            elif tuple(expected) != shape:
                raise ShapeMismatch(f"layer expects {expected}, got {shape}")
            shape = tuple(layer.out_shape)
        if not self.layers or self.layers[-1].kind is not LayerKind.DENSE:
            raise ShapeMismatch("final layer must be dense")
        if sum(1 for l in self.layers if l.plastic) > 1:
            raise ShapeMismatch("at most one plastic layer")

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].out_shape[0]

    def copy(self) -> "NetworkSpec":
        return NetworkSpec(self.input_shape, [l.copy() for l in self.layers])


def weighted_input(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Synaptic drive of one layer for one unbatched input tensor."""
    if layer.kind is LayerKind.SUM_POOL:
        return sum_pool(x[None], layer.kernel_size, layer.pool_gain)[0]
    if layer.kind is LayerKind.CONV:
        return conv2d(x[None], layer.weights, layer.padding)[0]
    return dense_drive(x.reshape(1, -1), layer.weights)[0]


def drive_sequence(layer: LayerSpec, x_seq: np.ndarray) -> np.ndarray:
    """Synaptic drive for a whole (N, *in_shape) stack of input tensors.

    Spikes feed strictly forward, so a layer's drive for every timestep can
    be computed in one batched operation before its state scan.
    """
    if layer.kind is LayerKind.SUM_POOL:
        return sum_pool(x_seq, layer.kernel_size, layer.pool_gain)
    if layer.kind is LayerKind.CONV:
        return conv2d(x_seq, layer.weights, layer.padding)
    return dense_drive(x_seq.reshape(x_seq.shape[0], -1), layer.weights)


def scan_layer(layer: LayerSpec, drive_seq: np.ndarray,
               overflow: OverflowMode = OverflowMode.STRICT) -> np.ndarray:
    """Step a conv/dense layer's neurons over a (T, *out_shape) drive."""
    state = NeuronState.zeros(drive_seq.shape[1:])
    spikes = np.empty_like(drive_seq)
    for t in range(drive_seq.shape[0]):
        state, spikes[t] = step_neuron(state, layer.params, drive_seq[t], overflow)
    return spikes


def layer_forward(layer: LayerSpec, in_spikes: np.ndarray,
                  state: NeuronState | None,
                  overflow: OverflowMode = OverflowMode.STRICT,
                  ) -> tuple[np.ndarray, NeuronState | None]:
    """Advance one layer one timestep.

    Pool layers pass window sums straight through (no neuron dynamics and no
    state); conv and dense layers drive their neurons with the weighted
    input and return binary spikes.
    """
    x = np.asarray(in_spikes, dtype=np.int64)
    if layer.kind is LayerKind.DENSE:
        if x.size != prod(layer.in_shape):
            raise ShapeMismatch(f"expected {layer.in_shape}, got {x.shape}")
    elif x.shape != tuple(layer.in_shape):
        raise ShapeMismatch(f"expected {layer.in_shape}, got {x.shape}")
    z = weighted_input(layer, x)
    if layer.kind is LayerKind.SUM_POOL:
        return z, state
    new_state, spikes = step_neuron(state, layer.params, z, overflow)
    return spikes, new_state


class RecordMode(enum.Enum):
    OUTPUT_COUNTS = "output_counts"
    ALL_SPIKES = "all_spikes"


@dataclass
class RunRecord:
    output_counts: np.ndarray
    n_steps: int
    spikes: list[np.ndarray] | None = None  # per layer, (T, *out_shape)

    @property
    def penultimate_spikes(self) -> np.ndarray:
        if self.spikes is None or len(self.spikes) < 2:
            raise ValueError("run was not recorded with ALL_SPIKES")
        t = self.spikes[-2].shape[0]
        return self.spikes[-2].reshape(t, -1)


def init_states(net: NetworkSpec) -> list[NeuronState | None]:
    return [None if l.kind is LayerKind.SUM_POOL else NeuronState.zeros(l.out_shape)
            for l in net.layers]


def _run_layer_stack(layers: list[LayerSpec], x_seq: np.ndarray,
                     overflow: OverflowMode,
                     keep_all: bool) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Propagate a (T, *shape) sequence through layers, one layer at a time."""
    rasters = [] if keep_all else None
    for layer in layers:
        if layer.kind is LayerKind.DENSE:
            x_seq = x_seq.reshape(x_seq.shape[0], -1)
        z = drive_sequence(layer, x_seq)
        x_seq = z if layer.kind is LayerKind.SUM_POOL else scan_layer(layer, z, overflow)
        if rasters is not None:
            rasters.append(x_seq)
    return x_seq, rasters


def run_network(net: NetworkSpec, frames: SpikeFrameSequence,
                record: RecordMode = RecordMode.OUTPUT_COUNTS,
                overflow: OverflowMode = OverflowMode.STRICT) -> RunRecord:
    """Run the network on a spike-frame sequence from zeroed state.

    Deterministic: identical (net, frames, overflow mode) give bit-identical
    records.
    """
    if frames.frames.shape[1:] != tuple(net.input_shape):
        raise ShapeMismatch(
            f"input {frames.frames.shape[1:]} does not match net {net.input_shape}")
    x_seq = frames.frames.astype(np.int64)
    out, rasters = _run_layer_stack(net.layers, x_seq, overflow,
                                    record is RecordMode.ALL_SPIKES)
    counts = out.sum(axis=0) if out.shape[0] else np.zeros(net.n_outputs, np.int64)
    return RunRecord(counts.astype(np.int64), frames.n_steps, rasters)


def run_features(net: NetworkSpec, frames: SpikeFrameSequence,
                 overflow: OverflowMode = OverflowMode.STRICT) -> np.ndarray:
    """Run all layers but the last; returns flattened spikes (T, n_features)."""
    if frames.frames.shape[1:] != tuple(net.input_shape):
        raise ShapeMismatch("input does not match net input shape")
    if frames.n_steps == 0:
        return np.zeros((0, prod(net.layers[-1].in_shape)), dtype=np.int64)
    x_seq = frames.frames.astype(np.int64)
    out, _ = _run_layer_stack(net.layers[:-1], x_seq, overflow, keep_all=False)
    return out.reshape(out.shape[0], -1)


# --- checkpoint (versioned, hashed, bit-exact round trip) ---

CHECKPOINT_VERSION = 1


def _params_payload(p: NeuronParams | None) -> dict | None:
    if p is None:
        return None
    return {
        "u_threshold": p.u_threshold,
        "current_decay": p.current_decay,
        "voltage_decay": p.voltage_decay,
        "refractory_decay": p.refractory_decay,
        "bias": p.bias,
        "refractory_mode": p.refractory_mode.value,
        "dt_us": p.dt_us,
    }


def _params_from_payload(d: dict | None) -> NeuronParams | None:
    if d is None:
        return None
    return NeuronParams(
        u_threshold=d["u_threshold"],
        current_decay=d["current_decay"],
        voltage_decay=d["voltage_decay"],
        refractory_decay=d["refractory_decay"],
        bias=d["bias"],
        refractory_mode=ResetMode(d["refractory_mode"]),
        dt_us=d["dt_us"],
    )


def network_payload(net: NetworkSpec) -> dict:
    layers = []
    for l in net.layers:
        layers.append({
            "kind": l.kind.value,
            "in_shape": list(l.in_shape),
            "out_shape": list(l.out_shape),
            "kernel_size": l.kernel_size,
            "zero_padding": l.zero_padding,
            "pool_gain": l.pool_gain,
            "plastic": l.plastic,
            "params": _params_payload(l.params),
            "weights": None if l.weights is None else l.weights.tolist(),
        })
    return {"version": CHECKPOINT_VERSION,
            "input_shape": list(net.input_shape),
            "layers": layers}


def network_from_payload(payload: dict) -> NetworkSpec:
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    layers = []
    for d in payload["layers"]:
        weights = None
        if d["weights"] is not None:
            weights = np.asarray(d["weights"], dtype=np.int64)
            if weights.min() < WEIGHT_MIN or weights.max() > WEIGHT_MAX or np.any(weights % 2):
                raise CheckpointError("weights off the even 8-bit grid")
        layers.append(LayerSpec(
            kind=LayerKind(d["kind"]),
            in_shape=tuple(d["in_shape"]),
            out_shape=tuple(d["out_shape"]),
            kernel_size=d["kernel_size"],
            zero_padding=d["zero_padding"],
            pool_gain=d["pool_gain"],
            plastic=d["plastic"],
            params=_params_from_payload(d["params"]),
            weights=weights,
        ))
    return NetworkSpec(tuple(payload["input_shape"]), layers)


def _canonical(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(net: NetworkSpec) -> bytes:
    payload = network_payload(net)
    digest = hashlib.sha256(_canonical(payload)).hexdigest()
    return json.dumps({"payload": payload, "sha256": digest},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(net: NetworkSpec, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net))


def build_network(input_shape: tuple[int, int, int], arch: list[str],
                  n_outputs: int, params: NeuronParams) -> NetworkSpec:
    """Build a network from compact layer tokens.

    Tokens: ``"Ya"`` is YxY sum pooling, ``"XcYz"`` is X conv filters of
    size YxY with zero padding (``"XcY"`` without), and a plain integer is
    a dense layer of that many units. A final dense output layer of
    n_outputs is appended automatically. All weights start at zero.
    """
    layers: list[LayerSpec] = []
    shape = tuple(input_shape)
    for token in arch:
        if token.endswith("a"):
            layers.append(make_pool(shape, int(token[:-1])))
        elif "c" in token:
            spec = token[:-1] if token.endswith("z") else token
            zero_pad = token.endswith("z")
            out_ch, kernel = spec.split("c")
            layers.append(make_conv(shape, int(out_ch), int(kernel), params,
                                    zero_padding=zero_pad))
        else:
            layers.append(make_dense(shape, int(token), params))
        shape = layers[-1].out_shape
    layers.append(make_dense(shape, n_outputs, params))
    return NetworkSpec(tuple(input_shape), layers)


def load_checkpoint(path) -> NetworkSpec:
    try:
        with open(path, "rb") as fh:
            doc = json.loads(fh.read().decode("utf-8"))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint: {exc}") from exc
    payload = doc.get("payload")
    if payload is None or "sha256" not in doc:
        raise CheckpointError("missing payload or hash")
    digest = hashlib.sha256(_canonical(payload)).hexdigest()
    if digest != doc["sha256"]:
        raise CheckpointError("content hash mismatch")
    return network_from_payload(payload)
