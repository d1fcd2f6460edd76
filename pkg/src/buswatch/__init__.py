"""buswatch: anomaly detection framework for robotic pub-sub telemetry."""

__version__ = "0.1.0"

from .alarmdesk import Alarm, AlarmDesk, AlarmPolicy, AlarmSignature  # noqa: F401
from .capture import TraceRecord, read_trace, start_capture, write_trace  # noqa: F401
from .detectors import AnomalyEvent, DetectorConfig, build_detector  # noqa: F401
from .envelope import Envelope, EnvelopeDim, RiskAccumulator, RiskModel  # noqa: F401
from .features import FeatureFrame, FeatureState, PartialAggregate  # noqa: F401
from .harness import SimulationHarness  # noqa: F401
from .msgbus import Bus, FieldSpec, Message, TopicSchema, schema  # noqa: F401
from .simbot import Injection, Scenario, ScenarioRunner, run_scenario  # noqa: F401
