"""Exception hierarchy shared by all fewspike modules."""


class FewspikeError(Exception):
    """Base class for all package errors."""


# --- event ingestion ---

class ParseError(FewspikeError):
    """Base class for event-file parsing failures."""


class MalformedRecord(ParseError):
    """A record has the wrong field count, field width, or value range."""


class NonmonotonicTimestampOverflow(ParseError):
    """A timestamp is negative or exceeds the 64-bit counter range."""


class EmptyFile(ParseError):
    """The input holds no header at all."""


class DimensionMismatch(FewspikeError):
    """Stream dimensions do not match the requested output dimensions."""


class SourceSmallerThanTarget(FewspikeError):
    """Downscale source is smaller than the requested target size."""


class StreamShorterThanWindow(FewspikeError):
    """Augmentation window is longer than the stream duration."""


class UnknownClass(FewspikeError):
    """class_id is not in the gesture generator catalog."""


# --- neuron / network core ---

class DecayOutOfRange(FewspikeError):
    """Decay constant outside [0, 4096]."""


class Overflow(FewspikeError):
    """Fixed-point state left the accumulator range in strict mode."""


class ShapeMismatch(FewspikeError):
    """Tensor shape incompatible with a layer or network contract."""


class CheckpointError(FewspikeError):
    """Checkpoint file is unreadable, has a bad version, or a bad hash."""


# --- training ---

class LabelOutOfRange(FewspikeError):
    """Class label is not a valid output index."""


class EmptyDataset(FewspikeError):
    """Training requires a nonempty dataset."""


class DivergedLoss(FewspikeError):
    """Loss became NaN or infinite."""


# --- online plasticity ---

class OffsetUnderflow(FewspikeError):
    """C + err went negative; the trace register cannot hold the error."""


class PresentationTooShort(FewspikeError):
    """Presentation is shorter than one error-evaluation interval."""


# --- few-shot harness ---

class InsufficientSamples(FewspikeError):
    """A class has fewer samples than shots + held-out test items."""


class NoFinalDense(FewspikeError):
    """Output-layer reset requires the final layer to be dense."""


# --- CLI ---

class InvalidConfig(FewspikeError):
    """Run configuration is missing or inconsistent."""
