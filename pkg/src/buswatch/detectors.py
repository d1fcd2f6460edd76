"""Anomaly detectors over feature frames.

Three pluggable senses of "anomalous":

* extreme   -- the watched value's z-score against a rolling baseline
               exceeds a threshold.
* isolated  -- the feature vector has at most n near neighbors (within
               distance t, in baseline-standardized space) among recent
               history; a point can be isolated without being extreme.
* abnormal  -- a relationship between two streams (built-in: their rate
               ratio) leaves the trusted band, even when each stream on its
               own looks fine, and vice versa: both streams scaling together
               is not abnormal.

Also here: the validity filter that keeps out-of-range data from ever
reaching the detectors (invalid data is filtered and counted, not alarmed),
and the assumption monitor that reports when a named operating assumption
flips truth value.

Baselines are self-excluding: a frame that fired an event does not update
the baseline, so anomalies cannot normalize themselves away.
"""

from __future__ import annotations

import math
import statistics
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureFrame
from .msgbus import Message, TopicSchema

EPSILON = 1e-9
DETECTOR_KINDS = ("extreme", "isolated", "abnormal")
DEFAULT_BASELINE_WINDOWS = 10
DEFAULT_ISOLATED_HISTORY = 128


@dataclass(frozen=True)
class AnomalyEvent:
    t_ms: int
    detector_id: str
    target: str
    score: float
    kind: str
    evidence: dict

    def to_json(self) -> dict:
        return {
            "t_ms": self.t_ms,
            "detector_id": self.detector_id,
            "target": self.target,
            "score": self.score,
            "kind": self.kind,
            "evidence": self.evidence,
        }


@dataclass(frozen=True)
class AssumptionChange:
    t_ms: int
    name: str
    old_value: bool
    new_value: bool

    def to_json(self) -> dict:
        return {"t_ms": self.t_ms, "name": self.name,
                "old_value": self.old_value, "new_value": self.new_value}


@dataclass
class DetectorConfig:
    """One detector instance. Meaning of t depends on kind:

    extreme: z-score threshold; isolated: neighbor distance threshold in
    standardized space; abnormal: half-width of the trusted ratio band.
    """

    id: str
    kind: str
    target: str | tuple[str, ...]
    t: float
    n: int = 0
    baseline_window_count: int = DEFAULT_BASELINE_WINDOWS
    history: int = DEFAULT_ISOLATED_HISTORY
    r_hat: float | None = None  # abnormal only; learned during warm-up if unset

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if not math.isfinite(self.t):
            raise ValueError("threshold t must be finite")
        if self.n < 0:
            raise ValueError("n must be >= 0")
        if isinstance(self.target, list):
            self.target = tuple(self.target)

    @property
    def target_label(self) -> str:
        if isinstance(self.target, tuple):
            return "+".join(self.target)
        return self.target


def load_detector_configs(docs) -> list[DetectorConfig]:
    """Build configs from parsed YAML (a list of mappings)."""
    out = []
    for doc in docs:
        out.append(DetectorConfig(
            id=doc["id"],
            kind=doc["kind"],
            target=doc["target"],
            t=float(doc["t"]),
            n=int(doc.get("n", 0)),
            baseline_window_count=int(doc.get("baseline_window_count",
                                              DEFAULT_BASELINE_WINDOWS)),
            history=int(doc.get("history", DEFAULT_ISOLATED_HISTORY)),
            r_hat=(float(doc["r_hat"]) if "r_hat" in doc else None),
        ))
    return out


# -- frame view -----------------------------------------------------------


class FrameView:
    """A frame plus auxiliary per-window values (payload means, composites)."""

    def __init__(self, frame: FeatureFrame, aux: dict | None = None):
        self.frame = frame
        self.aux = aux or {}

    @property
    def t_ms(self) -> int:
        return self.frame.window.end_ms

    def resolve(self, selector: str) -> float | None:
        """Selector grammar: total_rate | rate:<topic> | co:<a>:<b> |
        value:<topic>:<field> | absvalue:<topic>:<field> |
        group:<name>:<attr> | invalid:<topic>."""
        if selector == "total_rate":
            return self.frame.total_rate
        head, _, rest = selector.partition(":")
        if head == "rate":
            return self.frame.rate(rest)
        if head == "co":
            a, _, b = rest.partition(":")
            return self.frame.co(a, b)
        if head in ("value", "absvalue", "group", "invalid"):
            return self.aux.get(selector)
        raise ValueError(f"unknown feature selector {selector!r}")


# -- baselines ------------------------------------------------------------


class RollingBaseline:
    """Mean/std over the last N accepted values (population std)."""

    def __init__(self, size: int):
        self.values: deque[float] = deque(maxlen=max(2, size))

    @classmethod
    def from_values(cls, values) -> "RollingBaseline":
        b = cls(size=max(2, len(values)))
        for v in values:
            b.values.append(float(v))
        return b

    def update(self, value: float) -> None:
        self.values.append(float(value))

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.values) if self.values else 0.0

    @property
    def std(self) -> float:
        if len(self.values) < 2:
            return 0.0
        return statistics.pstdev(self.values)

    def state_dict(self) -> dict:
        return {"size": self.values.maxlen, "values": list(self.values)}

    def load_state_dict(self, state: dict) -> None:
        self.values = deque((float(v) for v in state["values"]), maxlen=state["size"])


def zscore(x: float, mean: float, std: float) -> float:
    return (x - mean) / max(std, EPSILON)


def score_extreme(x: float, baseline: RollingBaseline, threshold: float,
                  detector_id: str = "extreme", target: str = "", t_ms: int = 0,
                  ) -> AnomalyEvent | None:
    """Threshold rule on |z|; warm-up (fewer than 2 baseline frames) is silent."""
    if baseline.count < 2:
        return None
    z = zscore(x, baseline.mean, baseline.std)
    if abs(z) <= threshold:
        return None
    return AnomalyEvent(
        t_ms=t_ms, detector_id=detector_id, target=target, score=abs(z),
        kind="extreme",
        evidence={"value": x, "mean": baseline.mean, "std": baseline.std},
    )


def score_isolated(point, history, threshold: float, n: int,
                   detector_id: str = "isolated", target: str = "", t_ms: int = 0,
                   standardize: bool = True) -> AnomalyEvent | None:
    """Neighbor-count rule: anomalous iff at most n history points lie within
    distance <= threshold. Score is the distance to the (n+1)-th nearest.
    """
    hist = np.asarray(history, dtype=float)
    if hist.ndim == 1:
        hist = hist.reshape(-1, 1)
    pt = np.asarray(point, dtype=float).reshape(-1)
    if hist.shape[0] < n + 1:
        return None
    if standardize:
        mu = hist.mean(axis=0)
        sigma = hist.std(axis=0)
        scale = np.maximum(sigma, EPSILON)
        hist = (hist - mu) / scale
        pt = (pt - mu) / scale
    d = np.sqrt(((hist - pt) ** 2).sum(axis=1))
    near = int((d <= threshold).sum())
    if near > n:
        return None
    score = float(np.partition(d, n)[n])
    return AnomalyEvent(
        t_ms=t_ms, detector_id=detector_id, target=target, score=score,
        kind="isolated",
        evidence={"near_within_t": near, "n": n, "t": threshold,
                  "history_size": int(hist.shape[0])},
    )


def score_abnormal(ratio: float, r_hat: float, band: float,
                   detector_id: str = "abnormal", target: str = "", t_ms: int = 0,
                   ) -> AnomalyEvent | None:
    """Trusted-ratio rule: fire when the observed ratio leaves r_hat +/- band."""
    dev = abs(ratio - r_hat)
    if dev <= band:
        return None
    return AnomalyEvent(
        t_ms=t_ms, detector_id=detector_id, target=target,
        score=dev / max(band, EPSILON), kind="abnormal",
        evidence={"ratio": ratio, "r_hat": r_hat, "band": band},
    )


# -- stateful detectors ---------------------------------------------------


class Detector:
    """Shared shell: warm-up gating and self-excluding baseline updates."""

    def __init__(self, config: DetectorConfig):
        self.config = config
        self.frames_seen = 0
        self.notes: list[dict] = []

    @property
    def id(self) -> str:
        return self.config.id

    def process(self, view: FrameView) -> AnomalyEvent | None:
        raise NotImplementedError

    def state_dict(self) -> dict:
        raise NotImplementedError

    def load_state_dict(self, state: dict) -> None:
        raise NotImplementedError


class ExtremeDetector(Detector):
    def __init__(self, config: DetectorConfig):
        super().__init__(config)
        self.baseline = RollingBaseline(config.baseline_window_count)

    def process(self, view: FrameView) -> AnomalyEvent | None:
        x = view.resolve(self.config.target)
        if x is None:
            return None
        self.frames_seen += 1
        warm = max(2, self.config.baseline_window_count)
        event = None
        if self.baseline.count >= warm:
            event = score_extreme(x, self.baseline, self.config.t,
                                  detector_id=self.id, target=self.config.target,
                                  t_ms=view.t_ms)
        if event is None:
            self.baseline.update(x)
        return event

    def state_dict(self) -> dict:
        return {"kind": "extreme", "frames_seen": self.frames_seen,
                "baseline": self.baseline.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.frames_seen = state["frames_seen"]
        self.baseline.load_state_dict(state["baseline"])


class IsolatedDetector(Detector):
    def __init__(self, config: DetectorConfig):
        super().__init__(config)
        targets = config.target if isinstance(config.target, tuple) else (config.target,)
        self.targets = targets
        self.history: deque[tuple[float, ...]] = deque(maxlen=config.history)

    def _vector(self, view: FrameView) -> tuple[float, ...] | None:
        vals = []
        for sel in self.targets:
            v = view.resolve(sel)
            if v is None:
                return None
            vals.append(float(v))
        return tuple(vals)

    def process(self, view: FrameView) -> AnomalyEvent | None:
        vec = self._vector(view)
        if vec is None:
            return None
        self.frames_seen += 1
        warm = max(self.config.n + 1, self.config.baseline_window_count)
        event = None
        if len(self.history) >= warm:
            event = score_isolated(vec, list(self.history), self.config.t,
                                   self.config.n, detector_id=self.id,
                                   target=self.config.target_label, t_ms=view.t_ms)
        if event is None:
            self.history.append(vec)
        return event

    def state_dict(self) -> dict:
        return {"kind": "isolated", "frames_seen": self.frames_seen,
                "history": [list(v) for v in self.history],
                "maxlen": self.history.maxlen}

    def load_state_dict(self, state: dict) -> None:
        self.frames_seen = state["frames_seen"]
        self.history = deque((tuple(v) for v in state["history"]),
                             maxlen=state["maxlen"])


class AbnormalRatioDetector(Detector):
    """Built-in trusted model: the ratio of two topic rates.

    Target "ratio:<numerator_topic>:<denominator_topic>". The expected
    ratio is either configured or learned as the mean over warm-up frames,
    then frozen (it is the trusted reference, not a moving baseline). A
    zero denominator makes the ratio undefined: no event, but a note is
    emitted so the assumption monitor can surface it.
    """

    def __init__(self, config: DetectorConfig):
        super().__init__(config)
        head, _, rest = str(config.target).partition(":")
        if head != "ratio":
            raise ValueError(f"abnormal detector needs ratio:<a>:<b>, got {config.target!r}")
        self.num_topic, _, self.den_topic = rest.partition(":")
        self.r_hat = config.r_hat
        self._warmup: list[float] = []

    def process(self, view: FrameView) -> AnomalyEvent | None:
        num = view.frame.rate(self.num_topic)
        den = view.frame.rate(self.den_topic)
        self.frames_seen += 1
        if den == 0.0:
            self.notes.append({"t_ms": view.t_ms, "note": "ratio-undefined",
                               "target": str(self.config.target)})
            return None
        ratio = num / den
        if self.r_hat is None:
            self._warmup.append(ratio)
            if len(self._warmup) >= max(2, self.config.baseline_window_count):
                self.r_hat = statistics.fmean(self._warmup)
                self._warmup.clear()
            return None
        return score_abnormal(ratio, self.r_hat, self.config.t,
                              detector_id=self.id, target=str(self.config.target),
                              t_ms=view.t_ms)

    def state_dict(self) -> dict:
        return {"kind": "abnormal", "frames_seen": self.frames_seen,
                "r_hat": self.r_hat, "warmup": list(self._warmup)}

    def load_state_dict(self, state: dict) -> None:
        self.frames_seen = state["frames_seen"]
        self.r_hat = state["r_hat"]
        self._warmup = list(state["warmup"])


def build_detector(config: DetectorConfig) -> Detector:
    if config.kind == "extreme":
        return ExtremeDetector(config)
    if config.kind == "isolated":
        return IsolatedDetector(config)
    return AbnormalRatioDetector(config)


# -- validity filter --------------------------------------------------------


@dataclass(frozen=True)
class ValidityResult:
    valid: bool
    field: str | None = None
    value: object = None


def filter_validity(message: Message, schema: TopicSchema) -> ValidityResult:
    """Range-check a delivered message against its schema.

    Invalid messages are meant to be excluded from feature ingestion and
    counted on the validity channel; they must never directly produce
    anomaly events.
    """
    for spec in schema.fields:
        value = message.payload.get(spec.name)
        if value is not None and spec.range_violation(value):
            return ValidityResult(valid=False, field=spec.name, value=value)
    return ValidityResult(valid=True)


# -- assumption monitor -------------------------------------------------------


class Assumption:
    """Named predicate over frames, debounced by a minimum hold."""

    def __init__(self, name: str, predicate, min_hold: int = 1):
        self.name = name
        self.predicate = predicate
        self.min_hold = max(1, min_hold)
        self.value: bool | None = None
        self.last_change_ms: int | None = None
        self._candidate: bool | None = None
        self._streak = 0


class AssumptionSet:
    """Tracks assumption truth values; emits a change per debounced flip."""

    def __init__(self):
        self._assumptions: dict[str, Assumption] = {}

    def register(self, name: str, predicate, min_hold: int = 1) -> None:
        self._assumptions[name] = Assumption(name, predicate, min_hold)

    def values(self) -> dict:
        return {name: a.value for name, a in self._assumptions.items()}

    def check(self, view: FrameView) -> list[AssumptionChange]:
        changes = []
        for a in self._assumptions.values():
            raw = bool(a.predicate(view))
            if a.value is None:
                a.value = raw  # first observation sets the starting truth
                continue
            if raw == a.value:
                a._candidate = None
                a._streak = 0
                continue
            if a._candidate == raw:
                a._streak += 1
            else:
                a._candidate = raw
                a._streak = 1
            if a._streak >= a.min_hold:
                changes.append(AssumptionChange(
                    t_ms=view.t_ms, name=a.name, old_value=a.value, new_value=raw))
                a.value = raw
                a.last_change_ms = view.t_ms
                a._candidate = None
                a._streak = 0
        return changes
