"""Counting fast falling objects in event-camera streams, with a simulated feeder loop."""

__version__ = "0.1.0"

from .control import (
    ActuationCommand,
    FlowController,
    FlowSetpoint,
    PidController,
    SafetyMonitor,
    compute_error,
    pid_step,
    safety_check,
    to_actuation,
)
from .detection import BoundingBox, DetectionParams, box_center_y, detect
from .events import (
    Event,
    EventBoundsError,
    EventError,
    EventFormatError,
    EventOrderError,
    EventStream,
    Polarity,
    SensorGeometry,
    read_events,
    write_events,
)
from .filtering import ActivityFilter, ActivityFilterParams, activity_filter, polarity_filter
from .frames import AccumulationParams, BinaryFrame, FrameAccumulator, accumulate
from .pipeline import CountingPipeline, PipelineParams, count_stream
from .runs import run_closed_loop, run_fixed_count
from .simulator import GrainScene, SimParams, generate
from .tracking import CountLines, TrackedObject, Tracker, TrackerParams, frame_count, iou, match_boxes, update_counts
