"""Operating-envelope risk model with explainable emergency stops.

Each monitored dimension declares three nested ranges: normal bounds, a
wider factor-of-safety band, and the outermost envelope of physically
possible values. Inside the safety band there is no risk at all. Outside
it, a normalized exceedance grows from 0 (at the safety boundary) to 1 (at
the envelope edge); shaping and combining the per-dimension exceedances
gives an instantaneous risk value.

Brief excursions are tolerated: risk is accumulated through a leaky
integral and an excursion counter, and the stop decision fires either when
the integral crosses its cutoff or when too many excursions land inside a
rolling window. Every decision carries the dimensions that contributed, so
a stop is always explainable after the fact.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDim, InsufficientData

INF_RISK = math.inf


@dataclass(frozen=True)
class EnvelopeDim:
    """One monitored attribute with its eight nested bounds."""

    name: str
    unit: str
    n_lo: float
    n_hi: float
    fos_lo: float
    fos_hi: float
    oe_lo: float
    oe_hi: float

    def validate(self) -> None:
        ok = (self.oe_lo <= self.fos_lo <= self.n_lo <= self.n_hi
              <= self.fos_hi <= self.oe_hi)
        if not ok:
            raise DegenerateDim(
                f"dim {self.name!r}: bounds must nest normal within safety "
                f"within envelope, got oe=[{self.oe_lo},{self.oe_hi}] "
                f"fos=[{self.fos_lo},{self.fos_hi}] n=[{self.n_lo},{self.n_hi}]")

    def exceedance(self, value: float) -> tuple[float, bool]:
        """Normalized distance outside the safety band, clamped to [0, 1].

        Returns (exceedance, beyond_envelope). A dim whose safety bound
        coincides with the envelope edge cannot grade an excursion: any
        exceedance there is unbounded risk (infinity, triggering
        immediately).
        """
        if self.fos_lo <= value <= self.fos_hi:
            return 0.0, False
        if value > self.fos_hi:
            span = self.oe_hi - self.fos_hi
            if span <= 0:
                return INF_RISK, value > self.oe_hi
            return min((value - self.fos_hi) / span, 1.0), value > self.oe_hi
        span = self.fos_lo - self.oe_lo
        if span <= 0:
            return INF_RISK, value < self.oe_lo
        return min((self.fos_lo - value) / span, 1.0), value < self.oe_lo

    def to_json(self) -> dict:
        return {"name": self.name, "unit": self.unit,
                "n": [self.n_lo, self.n_hi],
                "fos": [self.fos_lo, self.fos_hi],
                "oe": [self.oe_lo, self.oe_hi]}


class Envelope:
    """An ordered set of envelope dimensions; validates nesting on build."""

    def __init__(self, dims):
        self.dims: tuple[EnvelopeDim, ...] = tuple(dims)
        for d in self.dims:
            d.validate()
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise DegenerateDim(f"duplicate dim names in {names}")

    def __len__(self):
        return len(self.dims)

    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    def to_json(self) -> dict:
        return {"dims": [d.to_json() for d in self.dims]}


@dataclass
class RiskModel:
    """Shaping and integration parameters for the risk surface."""

    combine: str = "max"  # max | sum
    p: float = 2.0
    weights: tuple[float, ...] | None = None  # per dim; defaults to all ones
    leak_per_s: float = 0.1
    cutoff: float = 2.0          # integral trigger level
    count_m: int = 3             # count trigger: m excursions ...
    count_window_ms: int = 10000  # ... within this window

    def __post_init__(self):
        if self.combine not in ("max", "sum"):
            raise ValueError(f"combine must be max or sum, got {self.combine!r}")
        if self.p < 1:
            raise ValueError("shape exponent p must be >= 1")

    def weight_vector(self, n_dims: int) -> tuple[float, ...]:
        if self.weights is None:
            return (1.0,) * n_dims
        if len(self.weights) != n_dims:
            raise ValueError(f"{len(self.weights)} weights for {n_dims} dims")
        if any(w < 0 for w in self.weights):
            raise ValueError("weights must be >= 0")
        return tuple(self.weights)


@dataclass(frozen=True)
class RiskReading:
    """Instantaneous risk of one state, with the per-dim breakdown."""

    risk: float
    exceedances: dict  # dim name -> normalized exceedance
    values: dict       # dim name -> raw value
    beyond_envelope: tuple[str, ...]  # dims whose reading left the envelope

    def contributing_dims(self) -> list[str]:
        return [n for n, e in self.exceedances.items() if e > 0]


def instantaneous_risk(phi, envelope: Envelope, model: RiskModel) -> RiskReading:
    """Risk of a state vector (one value per envelope dim, same order)."""
    values = list(phi)
    if len(values) != len(envelope):
        raise DegenerateDim(
            f"state has {len(values)} values for {len(envelope)} dims")
    weights = model.weight_vector(len(envelope))
    exceedances = {}
    beyond = []
    shaped = []
    for dim, value, w in zip(envelope.dims, values, weights):
        e, oob = dim.exceedance(value)
        exceedances[dim.name] = e
        if oob:
            beyond.append(dim.name)
        shaped.append(w * (e ** model.p if math.isfinite(e) else INF_RISK))
    risk = max(shaped) if model.combine == "max" else sum(shaped)
    return RiskReading(risk=risk, exceedances=exceedances,
                       values=dict(zip(envelope.names(), values)),
                       beyond_envelope=tuple(beyond))


@dataclass(frozen=True)
class EStopDecision:
    t_ms: int
    accumulated_risk: float
    triggering_rule: str  # "integral" | "count"
    contributing_dims: dict  # dim name -> exceedance at trigger time
    excursion_count: int

    def to_json(self) -> dict:
        return {"t_ms": self.t_ms,
                "accumulated_risk": self.accumulated_risk,
                "triggering_rule": self.triggering_rule,
                "contributing_dims": self.contributing_dims,
                "excursion_count": self.excursion_count}


class RiskAccumulator:
    """Leaky time integral plus excursion counting, firing one stop decision.

    After firing, the accumulator latches until reset() so a single unsafe
    episode produces exactly one decision.
    """

    def __init__(self, envelope: Envelope, model: RiskModel):
        self.envelope = envelope
        self.model = model
        self.level = 0.0
        self.last_reading: RiskReading | None = None
        self.excursions: deque[int] = deque()
        self.total_excursions = 0
        self.armed = True
        self._prev_risk = 0.0

    def update(self, phi, dt_ms: int, t_ms: int) -> EStopDecision | None:
        if dt_ms <= 0:
            raise ValueError("dt_ms must be positive")
        reading = instantaneous_risk(phi, self.envelope, self.model)
        return self.accumulate(reading, dt_ms, t_ms)

    def accumulate(self, reading: RiskReading, dt_ms: int, t_ms: int
                   ) -> EStopDecision | None:
        dt_s = dt_ms / 1000.0
        decay = math.exp(-self.model.leak_per_s * dt_s)
        if math.isfinite(reading.risk):
            self.level = self.level * decay + reading.risk * dt_s
        else:
            self.level = INF_RISK
        self.last_reading = reading

        if reading.risk > 0 and self._prev_risk == 0:
            self.excursions.append(t_ms)
            self.total_excursions += 1
        self._prev_risk = reading.risk
        while self.excursions and self.excursions[0] <= t_ms - self.model.count_window_ms:
            self.excursions.popleft()

        if not self.armed:
            return None
        rule = None
        if self.level >= self.model.cutoff:
            rule = "integral"
        elif len(self.excursions) >= self.model.count_m:
            rule = "count"
        if rule is None:
            return None
        self.armed = False
        return EStopDecision(
            t_ms=t_ms,
            accumulated_risk=self.level,
            triggering_rule=rule,
            contributing_dims={n: e for n, e in reading.exceedances.items() if e > 0},
            excursion_count=len(self.excursions),
        )

    def reset(self) -> None:
        self.level = 0.0
        self.excursions.clear()
        self.armed = True
        self._prev_risk = 0.0

    def state_dict(self) -> dict:
        return {"level": self.level if math.isfinite(self.level) else "inf",
                "excursions": list(self.excursions),
                "total_excursions": self.total_excursions,
                "armed": self.armed,
                "prev_risk": self._prev_risk if math.isfinite(self._prev_risk) else "inf"}

    def load_state_dict(self, state: dict) -> None:
        self.level = INF_RISK if state["level"] == "inf" else float(state["level"])
        self.excursions = deque(state["excursions"])
        self.total_excursions = state["total_excursions"]
        self.armed = state["armed"]
        raw = state["prev_risk"]
        self._prev_risk = INF_RISK if raw == "inf" else float(raw)

    def status(self) -> dict:
        reading = self.last_reading
        return {
            "level": self.level if math.isfinite(self.level) else None,
            "armed": self.armed,
            "excursions_in_window": len(self.excursions),
            "total_excursions": self.total_excursions,
            "last_values": reading.values if reading else {},
            "last_exceedances": reading.exceedances if reading else {},
        }


# -- surface fitting --------------------------------------------------------


def learn_surface(envelope: Envelope, samples, combine: str = "max",
                  p0: float = 2.0, min_samples: int = 10):
    """Fit the shape exponent and per-dim weights from labeled excursions.

    samples: iterable of (phi, outcome) with outcome severity in [0, 1].
    Monotonicity is preserved by construction: weights are bounded >= 0 and
    the exponent >= 1. A degenerate sample set (no outcome signal) keeps the
    defaults.
    """
    samples = list(samples)
    if len(samples) < min_samples:
        raise InsufficientData(f"need >= {min_samples} labeled excursions, "
                               f"got {len(samples)}")
    n_dims = len(envelope)
    exc = np.zeros((len(samples), n_dims))
    outcomes = np.zeros(len(samples))
    for i, (phi, outcome) in enumerate(samples):
        reading = instantaneous_risk(phi, envelope, RiskModel(combine=combine, p=1.0))
        exc[i] = [reading.exceedances[n] for n in envelope.names()]
        outcomes[i] = outcome

    if not np.isfinite(exc).all():
        raise InsufficientData("cannot fit through unbounded-risk dims")
    if np.allclose(outcomes, 0.0):
        return {"p": p0, "weights": (1.0,) * n_dims, "fit": False,
                "residual": float(np.mean(outcomes ** 2))}

    from scipy.optimize import minimize

    def predict(params):
        p = params[0]
        w = params[1:]
        shaped = w * exc ** p
        return shaped.max(axis=1) if combine == "max" else shaped.sum(axis=1)

    def loss(params):
        return float(np.mean((predict(params) - outcomes) ** 2))

    x0 = np.array([p0] + [1.0] * n_dims)
    bounds = [(1.0, 8.0)] + [(0.0, 10.0)] * n_dims
    res = minimize(loss, x0=x0, method="Nelder-Mead", bounds=bounds,
                   options={"maxiter": 4000, "xatol": 1e-6, "fatol": 1e-12})
    p_fit = float(res.x[0])
    w_fit = tuple(float(v) for v in res.x[1:])
    return {"p": p_fit, "weights": w_fit, "fit": True, "residual": float(res.fun)}


# -- config -----------------------------------------------------------------


def load_envelope_config(doc: dict):
    """Parse an envelope YAML document.

    Returns (Envelope, RiskModel, sources) where sources maps dim name to
    the {topic, field, abs} reading that feeds it.
    """
    dims = []
    sources = {}
    for d in doc["dims"]:
        dims.append(EnvelopeDim(
            name=d["name"], unit=d.get("unit", ""),
            n_lo=float(d["n"][0]), n_hi=float(d["n"][1]),
            fos_lo=float(d["fos"][0]), fos_hi=float(d["fos"][1]),
            oe_lo=float(d["oe"][0]), oe_hi=float(d["oe"][1])))
        if "source" in d:
            sources[d["name"]] = {
                "topic": d["source"]["topic"],
                "field": d["source"]["field"],
                "abs": bool(d["source"].get("abs", False)),
            }
    risk = doc.get("risk", {})
    model = RiskModel(
        combine=risk.get("combine", "max"),
        p=float(risk.get("p", 2.0)),
        weights=tuple(risk["weights"]) if "weights" in risk else None,
        leak_per_s=float(risk.get("leak_per_s", 0.1)),
        cutoff=float(risk.get("cutoff", 2.0)),
        count_m=int(risk.get("count_trigger", {}).get("m", 3)),
        count_window_ms=int(risk.get("count_trigger", {}).get("window_ms", 10000)),
    )
    return Envelope(dims), model, sources
