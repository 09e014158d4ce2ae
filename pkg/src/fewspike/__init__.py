"""Fixed-point spiking network simulation, surrogate-gradient pretraining,
error-triggered online plasticity, and a few-shot gesture experiment harness."""

__version__ = "0.1.0"

from .events import (  # noqa: F401
    EventFormat,
    EventStream,
    SpikeFrameSequence,
    augment,
    bin_events,
    downscale,
    parse_event_file,
    serialize_events,
)
from .network import NetworkSpec, build_network, load_checkpoint, run_network, save_checkpoint  # noqa: F401
from .neuron import NeuronParams, NeuronState, decay_factor, step_neuron  # noqa: F401
from .plasticity import SoelConfig, soel_present  # noqa: F401
from .pretrain import SurrogateConfig, TrainerConfig, bptt_gradients, train  # noqa: F401
from .quantize import quantize_weights, stochastic_round  # noqa: F401
from .synth import synth_gesture  # noqa: F401
