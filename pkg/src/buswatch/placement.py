"""Computation placement over simulated links, with graceful degradation.

Three placements of the feature/detector pipeline:

* local_only       every site computes its own frames; nothing forwarded.
* hub_spoke        raw records are forwarded to a central hub that does all
                   the computation.
* local_reduction  each site aggregates its window locally and forwards the
                   (far smaller) partial; the hub merges partials per
                   window. Over lossless links the hub's frames are exactly
                   the hub_spoke frames.

Links are simulated in process (latency, random drop, outage schedule), not
real sockets: the subject here is placement semantics and degradation, not
transport. When a site's hub link goes down, the site is in local fallback:
its own frames (and any site-local envelope monitoring) keep running on
schedule, and closed partials are buffered for back-fill up to a cap;
beyond the cap, gaps are explicit and counted, never silent.

The safety rule is structural: nothing on a site's envelope/e-stop path
ever waits on the hub.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .capture import TraceRecord, record_line
from .envelope import RiskAccumulator
from .errors import UnassignedTopic
from .features import CalendarMap, FeatureState, finalize, merge
from .msgbus import Message

MODES = ("local_only", "hub_spoke", "local_reduction", "peer_to_peer")
DEFAULT_BACKFILL_CAP = 60


@dataclass(frozen=True)
class LinkModel:
    latency_ms: int = 0
    drop_p: float = 0.0
    outages: tuple = ()  # ((start_ms, end_ms), ...)
    seed: int = 0

    def scheduled_up(self, t_ms: int) -> bool:
        return not any(s <= t_ms < e for s, e in self.outages)


@dataclass
class PlacementPlan:
    mode: str
    sites: dict  # site id -> list of topic paths (or ["*"] catch-all)
    hub: str = "hub"
    link: LinkModel = field(default_factory=LinkModel)
    site_links: dict = field(default_factory=dict)  # site id -> LinkModel
    backfill_cap: int = DEFAULT_BACKFILL_CAP

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown placement mode {self.mode!r}")
        if self.mode == "peer_to_peer":
            raise NotImplementedError(
                "peer_to_peer is a reserved mode, not implemented")

    def link_for(self, site: str) -> LinkModel:
        return self.site_links.get(site, self.link)

    def site_of(self, topic: str) -> str:
        catch_all = None
        for site, topics in self.sites.items():
            if topic in topics:
                return site
            if "*" in topics:
                catch_all = site
        if catch_all is None:
            raise UnassignedTopic(topic)
        return catch_all

    @classmethod
    def from_dict(cls, doc: dict) -> "PlacementPlan":
        def link_from(d):
            return LinkModel(
                latency_ms=int(d.get("latency_ms", 0)),
                drop_p=float(d.get("drop_p", 0.0)),
                outages=tuple((int(a), int(b)) for a, b in d.get("outages", ())),
                seed=int(d.get("seed", 0)))

        sites = {}
        site_links = {}
        for s in doc["sites"]:
            sites[s["id"]] = list(s["topics"])
            if "link" in s:
                site_links[s["id"]] = link_from(s["link"])
        return cls(
            mode=doc["mode"],
            sites=sites,
            hub=doc.get("hub", "hub"),
            link=link_from(doc.get("link", {})),
            site_links=site_links,
            backfill_cap=int(doc.get("backfill_cap", DEFAULT_BACKFILL_CAP)),
        )


@dataclass
class DegradationState:
    mode: str
    links_up: dict
    fallback_active: dict
    fallback_ms: dict
    dropped_partials: int
    dropped_records: int


class _Site:
    def __init__(self, site_id: str, window_ms: int, lag_ms: int, calendar,
                 accumulator: RiskAccumulator | None = None,
                 phi_source: tuple | None = None):
        self.id = site_id
        self.state = FeatureState(window_ms=window_ms, lag_ms=lag_ms,
                                  calendar=calendar, keep_closed_partials=True)
        self.frames = []
        self.buffer: list = []  # partials awaiting back-fill during an outage
        self.manual_down = False
        self.fallback_since: int | None = None
        self.fallback_ms = 0
        self.accumulator = accumulator
        self.phi_source = phi_source  # (topic, field) feeding the envelope dim
        self.estops = []
        self._last_phi_t: int | None = None
        self._phi_value: float | None = None

    def local_update(self, topic: str, t_ms: int, payload: dict) -> None:
        self.frames.extend(
            f for f in self.state.ingest(topic, t_ms))
        if self.accumulator is not None and self.phi_source is not None:
            src_topic, src_field = self.phi_source
            if topic == src_topic and src_field in payload:
                self._phi_value = abs(float(payload[src_field]))
            if self._phi_value is not None:
                dt = 0 if self._last_phi_t is None else t_ms - self._last_phi_t
                self._last_phi_t = t_ms
                if dt > 0:
                    decision = self.accumulator.update((self._phi_value,),
                                                       dt_ms=dt, t_ms=t_ms)
                    if decision is not None:
                        self.estops.append(decision)

    def advance(self, t_ms: int) -> None:
        self.frames.extend(self.state.advance_to(t_ms))

    def take_closed(self):
        closed = list(self.state.closed_partials)
        self.state.closed_partials.clear()
        return closed


class PlacementSimulator:
    """Routes an ordered record stream through one placement plan."""

    def __init__(self, plan: PlacementPlan, window_ms: int = 1000,
                 lag_ms: int = 100, calendar: CalendarMap | None = None,
                 site_envelopes: dict | None = None):
        self.plan = plan
        self.window_ms = window_ms
        self.lag_ms = lag_ms
        self.calendar = calendar or CalendarMap()
        self.sites: dict[str, _Site] = {}
        for site_id in plan.sites:
            env = (site_envelopes or {}).get(site_id)
            self.sites[site_id] = _Site(
                site_id, window_ms, lag_ms, self.calendar,
                accumulator=env[0] if env else None,
                phi_source=env[1] if env else None)
        self.hub_state = FeatureState(window_ms=window_ms, lag_ms=lag_ms,
                                      calendar=self.calendar)
        self.hub_frames = []
        self._hub_partials: dict[tuple, dict] = {}  # window -> site -> partial
        self._in_flight: list = []  # (arrival_ms, site, partial)
        self._rng = {s: random.Random(plan.link_for(s).seed + i)
                     for i, s in enumerate(sorted(plan.sites))}
        self.forwarded_bytes = 0
        self.merged_windows = 0
        self.dropped_partials = 0
        self.dropped_records = 0
        self._now = 0

    # -- link state -----------------------------------------------------------

    def link_up(self, site: str, t_ms: int) -> bool:
        s = self.sites[site]
        return (not s.manual_down) and self.plan.link_for(site).scheduled_up(t_ms)

    def on_link_event(self, site: str, up: bool, t_ms: int) -> DegradationState:
        self.sites[site].manual_down = not up
        self._sync_fallback(t_ms)
        if up:
            self._backfill(site, t_ms)
        return self.degradation_state(t_ms)

    def _sync_fallback(self, t_ms: int) -> None:
        for site_id, site in self.sites.items():
            up = self.link_up(site_id, t_ms)
            if not up and site.fallback_since is None:
                site.fallback_since = t_ms
            elif up and site.fallback_since is not None:
                site.fallback_ms += t_ms - site.fallback_since
                site.fallback_since = None

    # -- routing ------------------------------------------------------------------

    def feed(self, rec) -> None:
        topic, t_ms = rec.topic, rec.t_ms
        payload = rec.payload
        self._now = t_ms
        self._sync_fallback(t_ms)
        self._deliver_in_flight(t_ms)

        owner = self.plan.site_of(topic)
        for site_id, site in self.sites.items():
            site.advance(t_ms)
        self.sites[owner].local_update(topic, t_ms, payload)

        if self.plan.mode == "hub_spoke":
            if self.link_up(owner, t_ms) and not self._dropped(owner):
                self.forwarded_bytes += len(record_line(
                    rec if isinstance(rec, TraceRecord) else
                    TraceRecord(t_ms=t_ms, topic=topic, seq=getattr(rec, "seq", 0),
                                payload=payload)))
                self.hub_frames.extend(self.hub_state.ingest(topic, t_ms))
            else:
                self.dropped_records += 1
        self._flush_site_partials(t_ms)

    def _dropped(self, site: str) -> bool:
        p = self.plan.link_for(site).drop_p
        return p > 0 and self._rng[site].random() < p

    def _flush_site_partials(self, t_ms: int) -> None:
        if self.plan.mode != "local_reduction":
            for site in self.sites.values():
                if site.state.closed_partials:
                    site.state.closed_partials.clear()
            return
        for site_id, site in self.sites.items():
            for partial in site.take_closed():
                if self.link_up(site_id, t_ms):
                    self._transmit(site_id, partial, t_ms)
                else:
                    site.buffer.append(partial)
                    if len(site.buffer) > self.plan.backfill_cap:
                        site.buffer.pop(0)
                        self.dropped_partials += 1

    def _transmit(self, site_id: str, partial, t_ms: int) -> None:
        if self._dropped(site_id):
            self.dropped_partials += 1
            return
        self.forwarded_bytes += partial.serialized_size()
        arrival = t_ms + self.plan.link_for(site_id).latency_ms
        self._in_flight.append((arrival, site_id, partial))

    def _backfill(self, site_id: str, t_ms: int) -> None:
        site = self.sites[site_id]
        for partial in site.buffer:
            self._transmit(site_id, partial, t_ms)
        site.buffer.clear()

    def _deliver_in_flight(self, t_ms: int) -> None:
        ready = [x for x in self._in_flight if x[0] <= t_ms]
        self._in_flight = [x for x in self._in_flight if x[0] > t_ms]
        for _, site_id, partial in sorted(ready, key=lambda x: (x[0], x[1])):
            key = (partial.window.start_ms, partial.window.end_ms)
            per_site = self._hub_partials.setdefault(key, {})
            per_site[site_id] = partial
            if len(per_site) == len(self.sites):
                self._merge_window(key)

    def _merge_window(self, key) -> None:
        per_site = self._hub_partials.pop(key)
        merged = None
        for site_id in sorted(per_site):
            merged = per_site[site_id] if merged is None else merge(
                merged, per_site[site_id])
        self.hub_frames.append(finalize(merged, self.lag_ms, self.calendar))
        self.merged_windows += 1

    # -- termination ------------------------------------------------------------------

    def finish(self, end_ms: int) -> None:
        self._sync_fallback(end_ms)
        for site_id in self.sites:
            if self.link_up(site_id, end_ms):
                self._backfill(site_id, end_ms)
        for site in self.sites.values():
            site.advance(end_ms)
        if self.plan.mode == "hub_spoke":
            self.hub_frames.extend(self.hub_state.advance_to(end_ms))
        self._flush_site_partials(end_ms)
        self._deliver_in_flight(end_ms + max(
            self.plan.link_for(s).latency_ms for s in self.plan.sites))
        # whatever windows never completed stay as explicit gaps
        self.hub_frames.sort(key=lambda f: f.window.start_ms)

    def degradation_state(self, t_ms: int | None = None) -> DegradationState:
        t = self._now if t_ms is None else t_ms
        return DegradationState(
            mode=self.plan.mode,
            links_up={s: self.link_up(s, t) for s in sorted(self.sites)},
            fallback_active={s: self.sites[s].fallback_since is not None
                             for s in sorted(self.sites)},
            fallback_ms={s: self.sites[s].fallback_ms
                         + ((t - self.sites[s].fallback_since)
                            if self.sites[s].fallback_since is not None else 0)
                         for s in sorted(self.sites)},
            dropped_partials=self.dropped_partials,
            dropped_records=self.dropped_records,
        )

    def metrics(self) -> dict:
        return {
            "mode": self.plan.mode,
            "forwarded_bytes": self.forwarded_bytes,
            "merged_windows": self.merged_windows,
            "dropped_partials": self.dropped_partials,
            "dropped_records": self.dropped_records,
            "fallback_seconds": {s: self.sites[s].fallback_ms / 1000.0
                                 for s in sorted(self.sites)},
        }


def route(records, plan: PlacementPlan, window_ms: int = 1000, lag_ms: int = 100,
          end_ms: int | None = None, site_envelopes: dict | None = None
          ) -> PlacementSimulator:
    """Run a whole record stream through a plan and return the simulator."""
    sim = PlacementSimulator(plan, window_ms=window_ms, lag_ms=lag_ms,
                             site_envelopes=site_envelopes)
    last_t = 0
    for rec in records:
        sim.feed(rec)
        last_t = rec.t_ms
    sim.finish(end_ms if end_ms is not None else last_t + window_ms)
    return sim
