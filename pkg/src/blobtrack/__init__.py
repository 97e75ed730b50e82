"""Asynchronous event-blob detection, validation, and tracking."""

__version__ = "0.1.0"

from .blob_model import BlobState, event_density, gate, gate_threshold, shape_matrix
from .events import Event, EventArray, LabeledEvent, read_event_array, read_events, write_events
from .config import PipelineConfig, default_config, load_config

__all__ = [
    "__version__",
    "BlobState",
    "Event",
    "EventArray",
    "LabeledEvent",
    "PipelineConfig",
    "default_config",
    "event_density",
    "gate",
    "gate_threshold",
    "load_config",
    "read_event_array",
    "read_events",
    "shape_matrix",
    "write_events",
]
