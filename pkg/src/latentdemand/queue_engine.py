"""Discrete-event counterfactual replay of trips as an EV fleet.

Every trip is driven through consumption, a willingness draw, station
choice and one of three queue disciplines; energy that could not be served
because plugs were busy (or the car had to leave the waiting line for its
next trip) is booked as lost demand. Served and lost events together give
an hourly panel where observed demand, true demand and censoring flags are
all known.

Event ordering: a single heap keyed by (time, vehicle_id, kind, seq) where
plug releases sort before queue departures before arrivals at equal
(time, vehicle_id). All randomness comes from one seeded generator drawn
in event order, so a run is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import enum
import heapq
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .data_ingest import EVehicle, Station, Trip
from .errors import ValidationError
from .fleet_sim import (
    ChargeEvent,
    FAST_BRANCH_SOC,
    WillingnessParams,
    charge,
    station_choice_probabilities,
    time_to_80,
    trip_consumption,
    update_soc,
    willingness_to_charge,
)

HOUR_S = 3600.0


class QueuePolicy(enum.Enum):
    GAS_STATION = "gas_station"
    THREE_HOUR = "three_hour"
    FIRST_COME = "first_come"


@dataclass(frozen=True)
class SimParams:
    willingness: WillingnessParams = WillingnessParams()
    station_choice_sign: float = -1.0
    three_hour_limit_h: float = 3.0


@dataclass
class DemandLedger:
    """All charging outcomes of one replay, split by whether they were served."""

    served: list[ChargeEvent] = field(default_factory=list)
    lost: list[ChargeEvent] = field(default_factory=list)

    def all_events(self) -> list[ChargeEvent]:
        return self.served + self.lost

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vehicle_id", "station_id", "arrival", "depart",
                        "soc_before", "soc_after", "energy_kwh", "served"])
            events = sorted(self.all_events(), key=lambda e: (e.arrival, e.vehicle_id, not e.served))
            for e in events:
                w.writerow([e.vehicle_id, e.station_id, repr(float(e.arrival)), repr(float(e.depart)),
                            repr(e.soc_before), repr(e.soc_after), repr(e.energy_kwh), int(e.served)])

    @staticmethod
    def load_csv(path) -> "DemandLedger":
        ledger = DemandLedger()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                ev = ChargeEvent(row["vehicle_id"], row["station_id"], float(row["arrival"]),
                                 float(row["depart"]), float(row["soc_before"]), float(row["soc_after"]),
                                 float(row["energy_kwh"]), bool(int(row["served"])))
                (ledger.served if ev.served else ledger.lost).append(ev)
        return ledger


# Heap event kinds; the rank participates in the ordering after vehicle_id.
_K_RELEASE = 0
_K_LEAVE_QUEUE = 1
_K_ARRIVE = 2


@dataclass
class _Waiter:
    token: int
    vehicle_id: str
    joined_at: float
    next_trip_start: float
    active: bool = True


class _StationState:
    __slots__ = ("station", "free_plugs", "line")

    def __init__(self, station: Station):
        self.station = station
        self.free_plugs = station.plugs
        self.line: deque[_Waiter] = deque()


class _Replay:
    """Single-run simulation state; see run_counterfactual for the contract."""

    def __init__(self, trips, fleet, stations, policy, params, seed):
        self.trips = trips
        self.fleet = fleet
        self.stations = list(stations)
        self.policy = policy
        self.params = params
        self.rng = np.random.default_rng(seed)
        self.states = {s.station_id: _StationState(s) for s in self.stations}
        self.ledger = DemandLedger()
        self.heap: list = []
        self.seq = 0
        self.waiting: dict[str, tuple[str, int]] = {}  # vehicle -> (station, token)
        self.next_token = 0
        # Per-vehicle chronological trip list and the departure time after each trip.
        self.vehicle_trips: dict[str, list[Trip]] = {}
        for t in trips:
            self.vehicle_trips.setdefault(t.vehicle_id, []).append(t)
        # Vehicles park until their next trip; after the final trip they
        # stay until the horizon, which sits at least one hour past the
        # last arrival so the final park always has a service window.
        horizon = max((t.end_time for t in trips), default=0)
        self.horizon_end = math.ceil((horizon + HOUR_S) / HOUR_S) * HOUR_S
        self.trip_pos: dict[str, int] = {v: 0 for v in self.vehicle_trips}

    def push(self, time, vehicle_id, kind, payload):
        heapq.heappush(self.heap, (float(time), vehicle_id, kind, self.seq, payload))
        self.seq += 1

    def next_trip_start(self, vehicle_id: str, after_index: int) -> float:
        seq = self.vehicle_trips[vehicle_id]
        if after_index + 1 < len(seq):
            return float(seq[after_index + 1].start_time)
        return self.horizon_end

    def run(self) -> DemandLedger:
        for vid, seq in self.vehicle_trips.items():
            for i, trip in enumerate(seq):
                self.push(trip.end_time, vid, _K_ARRIVE, (i, trip))
        while self.heap:
            when, vehicle_id, kind, _, payload = heapq.heappop(self.heap)
            if kind == _K_ARRIVE:
                self._handle_arrival(vehicle_id, *payload)
            elif kind == _K_RELEASE:
                self._handle_release(when, payload)
            else:
                self._handle_leave_queue(vehicle_id, payload)
        return self.ledger

    # -- event handlers -------------------------------------------------

    def _handle_arrival(self, vehicle_id: str, trip_index: int, trip: Trip) -> None:
        veh = self.fleet[vehicle_id]
        soc_start = veh.soc
        consumption = trip_consumption(trip.distance_km, veh.spec.range_km)
        soc_end, _depleted = update_soc(soc_start, consumption)
        veh.soc = soc_end
        prob = willingness_to_charge(soc_start, soc_end, self.params.willingness)
        wants_charge = self.rng.random() < prob
        if not wants_charge:
            return
        cands, probs = station_choice_probabilities(
            trip.end_lat, trip.end_lon, self.stations, self.params.station_choice_sign)
        station = self.stations[cands[int(self.rng.choice(len(cands), p=probs))]]
        state = self.states[station.station_id]
        now = float(trip.end_time)
        until = self.next_trip_start(vehicle_id, trip_index)
        if self.policy is QueuePolicy.GAS_STATION:
            self.step_gas_station_queue(state, vehicle_id, now, until)
        elif self.policy is QueuePolicy.THREE_HOUR:
            self.step_three_hour_queue(state, vehicle_id, now, until)
        else:
            self.step_first_come_queue(state, vehicle_id, now, until)

    def _handle_release(self, now: float, station_id: str) -> None:
        state = self.states[station_id]
        state.free_plugs += 1
        if state.free_plugs > state.station.plugs:
            raise AssertionError(f"plug accounting broken at {station_id}")
        # Serve the line head(s); entries whose vehicle already left are stale.
        while state.free_plugs > 0 and state.line:
            waiter = state.line[0]
            if not waiter.active:
                state.line.popleft()
                continue
            state.line.popleft()
            waiter.active = False
            self.waiting.pop(waiter.vehicle_id, None)
            if waiter.next_trip_start <= now:
                # Plug freed exactly as the car has to leave: no service window.
                self._book_lost(waiter.vehicle_id, state.station.station_id,
                                waiter.joined_at, waiter.next_trip_start)
            else:
                self._plug_in(state, waiter.vehicle_id, now, waiter.next_trip_start)

    def _handle_leave_queue(self, vehicle_id: str, payload) -> None:
        station_id, token = payload
        entry = self.waiting.get(vehicle_id)
        if entry is None or entry != (station_id, token):
            return  # already served or already booked lost
        self.waiting.pop(vehicle_id)
        state = self.states[station_id]
        for waiter in state.line:
            if waiter.token == token:
                waiter.active = False
                self._book_lost(vehicle_id, station_id, waiter.joined_at, waiter.next_trip_start)
                return

    # -- queue disciplines ------------------------------------------------

    def step_gas_station_queue(self, state: _StationState, vehicle_id: str,
                               now: float, until: float) -> None:
        """FIFO waiting line; plugged cars charge to the fast-branch target
        (partial if the next trip interrupts), waiting cars that must leave
        are booked lost."""
        if state.free_plugs > 0 and until > now:
            self._plug_in(state, vehicle_id, now, until)
        elif until <= now:
            self._book_lost(vehicle_id, state.station.station_id, now, until)
        else:
            waiter = _Waiter(self.next_token, vehicle_id, now, until)
            self.next_token += 1
            state.line.append(waiter)
            self.waiting[vehicle_id] = (state.station.station_id, waiter.token)
            self.push(until, vehicle_id, _K_LEAVE_QUEUE, (state.station.station_id, waiter.token))

    def step_three_hour_queue(self, state: _StationState, vehicle_id: str,
                              now: float, until: float) -> None:
        """Charge for at most the parking-limit hours if a plug is free,
        otherwise the arrival is lost; there is no waiting line."""
        if state.free_plugs > 0 and until > now:
            limit_end = now + self.params.three_hour_limit_h * HOUR_S
            self._plug_in(state, vehicle_id, now, min(until, limit_end))
        else:
            self._book_lost(vehicle_id, state.station.station_id, now, until)

    def step_first_come_queue(self, state: _StationState, vehicle_id: str,
                              now: float, until: float) -> None:
        """Occupy a free plug until the next trip starts, else the arrival
        is lost; there is no waiting line."""
        if state.free_plugs > 0 and until > now:
            self._plug_in(state, vehicle_id, now, until)
        else:
            self._book_lost(vehicle_id, state.station.station_id, now, until)

    # -- bookkeeping ------------------------------------------------------

    def _plug_in(self, state: _StationState, vehicle_id: str, now: float, window_end: float) -> None:
        veh = self.fleet[vehicle_id]
        station = state.station
        soc_before = veh.soc
        window_h = (window_end - now) / HOUR_S
        if self.policy is QueuePolicy.GAS_STATION:
            if soc_before >= FAST_BRANCH_SOC:
                duration_h = 0.0
            else:
                duration_h = min(time_to_80(veh.spec.capacity_kwh, soc_before, station.power_kw),
                                 window_h)
        else:
            duration_h = window_h
        soc_after = charge(soc_before, veh.spec.capacity_kwh, station.power_kw, duration_h)
        # The curve's slow branch can sit below a high starting charge;
        # a plugged car never discharges.
        soc_after = max(soc_after, soc_before)
        energy = (soc_after - soc_before) * veh.spec.capacity_kwh
        depart = now + duration_h * HOUR_S
        self.ledger.served.append(ChargeEvent(vehicle_id, station.station_id, now, depart,
                                              soc_before, soc_after, energy, True))
        veh.soc = soc_after
        if duration_h > 0.0:
            state.free_plugs -= 1
            self._release_at(depart, vehicle_id, station.station_id)

    def _release_at(self, when: float, vehicle_id: str, station_id: str) -> None:
        self.push(when, vehicle_id, _K_RELEASE, station_id)

    def _book_lost(self, vehicle_id: str, station_id: str, arrival: float, depart: float) -> None:
        veh = self.fleet[vehicle_id]
        soc = veh.soc
        energy = max(0.0, (FAST_BRANCH_SOC - soc) * veh.spec.capacity_kwh)
        self.ledger.lost.append(ChargeEvent(vehicle_id, station_id, arrival, max(arrival, depart),
                                            soc, soc, energy, False))
        # Proceed as if the fill had happened so the same unserved energy is
        # not booked again at the next stop.
        veh.soc = max(soc, FAST_BRANCH_SOC)


def run_counterfactual(trips: list[Trip], fleet: dict[str, EVehicle], stations: list[Station],
                       policy: QueuePolicy, params: SimParams = SimParams(),
                       seed: int = 0) -> DemandLedger:
    """Replay trips chronologically under one queue discipline.

    Requires time-sorted trips whose vehicles all exist in the fleet; the
    fleet's state of charge is mutated in place. Deterministic given the
    seed.
    """
    if any(trips[i].start_time > trips[i + 1].start_time for i in range(len(trips) - 1)):
        raise ValidationError("trips must be sorted by start_time")
    missing = {t.vehicle_id for t in trips} - set(fleet)
    if missing:
        raise ValidationError(f"trips reference unknown vehicles: {sorted(missing)[:5]}")
    if not stations:
        raise ValidationError("no stations given")
    replay = _Replay(trips, fleet, stations, policy, params, seed)
    return replay.run()


# ---------------------------------------------------------------------------
# Hourly aggregation


@dataclass
class DemandPanel:
    """Hourly cluster-level demand: observed (served), true (served + lost),
    censoring flags and the clip thresholds.

    The threshold column equals the observed value; it is only meaningful
    where the censored flag is set (the observation is the clip point).
    """

    start_time: int  # epoch seconds, hour aligned
    observed: np.ndarray   # (hours, clusters) kWh
    true_demand: np.ndarray
    censored: np.ndarray   # bool
    threshold: np.ndarray

    @property
    def n_hours(self) -> int:
        return self.observed.shape[0]

    @property
    def n_clusters(self) -> int:
        return self.observed.shape[1]

    def save_csv(self, path) -> None:
        base_hour = self.start_time // 3600
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cluster", "hour", "observed_kwh", "true_kwh", "censored", "threshold"])
            for c in range(self.n_clusters):
                for h in range(self.n_hours):
                    w.writerow([c, base_hour + h, repr(float(self.observed[h, c])),
                                repr(float(self.true_demand[h, c])), int(self.censored[h, c]),
                                repr(float(self.threshold[h, c]))])

    @staticmethod
    def load_csv(path) -> "DemandPanel":
        rows = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append((int(row["cluster"]), int(row["hour"]), float(row["observed_kwh"]),
                             float(row["true_kwh"]), int(row["censored"]), float(row["threshold"])))
        if not rows:
            raise ValidationError(f"{path}: empty panel")
        clusters = sorted({r[0] for r in rows})
        hours = sorted({r[1] for r in rows})
        if clusters != list(range(len(clusters))):
            raise ValidationError(f"{path}: cluster ids must be 0..k-1")
        if hours != list(range(hours[0], hours[0] + len(hours))):
            raise ValidationError(f"{path}: hour range has gaps")
        k, n = len(clusters), len(hours)
        panel = DemandPanel(hours[0] * 3600, np.zeros((n, k)), np.zeros((n, k)),
                            np.zeros((n, k), dtype=bool), np.zeros((n, k)))
        for c, h, obs, true, cen, thr in rows:
            i = h - hours[0]
            panel.observed[i, c] = obs
            panel.true_demand[i, c] = true
            panel.censored[i, c] = bool(cen)
            panel.threshold[i, c] = thr
        return panel


def _hour_range_for(ledger: DemandLedger) -> tuple[int, int]:
    events = ledger.all_events()
    if not events:
        return 0, 3600
    lo = min(e.arrival for e in events)
    hi = max(max(e.depart, e.arrival) for e in events)
    start = int(math.floor(lo / 3600.0)) * 3600
    end = int(math.ceil(hi / 3600.0)) * 3600
    if end <= start:
        end = start + 3600
    return start, end


def _spread_energy(matrix: np.ndarray, col: int, start_time: int, ev: ChargeEvent) -> None:
    # Served energy is apportioned across hours proportionally to the time
    # the car is connected.
    span = ev.depart - ev.arrival
    if span <= 0:
        matrix[int((ev.arrival - start_time) // 3600), col] += ev.energy_kwh
        return
    first = int((ev.arrival - start_time) // 3600)
    last = int(math.ceil((ev.depart - start_time) / 3600.0))
    for h in range(first, last):
        lo = start_time + h * 3600.0
        overlap = min(ev.depart, lo + 3600.0) - max(ev.arrival, lo)
        if overlap > 0:
            matrix[h, col] += ev.energy_kwh * (overlap / span)


def aggregate_demand(ledger: DemandLedger, cluster_of: dict[str, int],
                     hours: tuple[int, int] | None = None) -> DemandPanel:
    """Aggregate a ledger into an hourly (cluster x hour) panel.

    ``hours`` is an hour-aligned (start, end) epoch-second range; events
    outside it raise ValidationError. Lost demand is booked entirely into
    its arrival hour (it has no service interval to spread over).
    """
    if hours is None:
        hours = _hour_range_for(ledger)
    start, end = int(hours[0]), int(hours[1])
    if start % 3600 or end % 3600 or end <= start:
        raise ValidationError(f"hours range must be hour-aligned and non-empty, got {hours}")
    n_hours = (end - start) // 3600
    k = max(cluster_of.values()) + 1 if cluster_of else 0
    if k == 0:
        raise ValidationError("empty cluster assignment")
    observed = np.zeros((n_hours, k))
    lost = np.zeros((n_hours, k))
    for ev in ledger.all_events():
        if ev.station_id not in cluster_of:
            raise ValidationError(f"station {ev.station_id} has no cluster")
        col = cluster_of[ev.station_id]
        if ev.arrival < start or max(ev.depart, ev.arrival) > end:
            raise ValidationError(
                f"event at {ev.arrival}..{ev.depart} outside panel range {start}..{end}")
        if ev.served:
            _spread_energy(observed, col, start, ev)
        else:
            lost[int((ev.arrival - start) // 3600), col] += ev.energy_kwh
    true_demand = observed + lost
    censored = true_demand > observed
    return DemandPanel(start, observed, true_demand, censored, observed.copy())


@dataclass
class StationPanel:
    """Hourly per-station total demand (served + lost), the base input for
    the competing-services protocol."""

    start_time: int
    station_ids: list[str]
    demand: np.ndarray  # (hours, stations) kWh

    def save_csv(self, path) -> None:
        base_hour = self.start_time // 3600
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["station_id", "hour", "demand_kwh"])
            for j, sid in enumerate(self.station_ids):
                for h in range(self.demand.shape[0]):
                    w.writerow([sid, base_hour + h, repr(float(self.demand[h, j]))])

    @staticmethod
    def load_csv(path) -> "StationPanel":
        rows = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append((row["station_id"], int(row["hour"]), float(row["demand_kwh"])))
        if not rows:
            raise ValidationError(f"{path}: empty station panel")
        ids = sorted({r[0] for r in rows})
        hours = sorted({r[1] for r in rows})
        demand = np.zeros((len(hours), len(ids)))
        hidx = {h: i for i, h in enumerate(hours)}
        sidx = {s: j for j, s in enumerate(ids)}
        for sid, h, val in rows:
            demand[hidx[h], sidx[sid]] = val
        return StationPanel(hours[0] * 3600, ids, demand)


def aggregate_by_station(ledger: DemandLedger, station_ids,
                         hours: tuple[int, int] | None = None) -> StationPanel:
    """Station-level hourly total (served + lost) demand."""
    if hours is None:
        hours = _hour_range_for(ledger)
    start, end = int(hours[0]), int(hours[1])
    if start % 3600 or end % 3600 or end <= start:
        raise ValidationError(f"hours range must be hour-aligned and non-empty, got {hours}")
    ids = sorted(station_ids)
    col_of = {sid: j for j, sid in enumerate(ids)}
    demand = np.zeros(((end - start) // 3600, len(ids)))
    for ev in ledger.all_events():
        if ev.station_id not in col_of:
            raise ValidationError(f"event references unknown station {ev.station_id}")
        if ev.arrival < start or max(ev.depart, ev.arrival) > end:
            raise ValidationError(
                f"event at {ev.arrival}..{ev.depart} outside panel range {start}..{end}")
        if ev.served:
            _spread_energy(demand, col_of[ev.station_id], start, ev)
        else:
            demand[int((ev.arrival - start) // 3600), col_of[ev.station_id]] += ev.energy_kwh
    return StationPanel(start, ids, demand)


def censorship_stats(panel: DemandPanel) -> dict:
    """Fraction of censored hours per cluster and pooled over all cells."""
    per_cluster = panel.censored.mean(axis=0)
    return {
        "pooled": float(panel.censored.mean()),
        "per_cluster": [float(x) for x in per_cluster],
        "n_hours": int(panel.n_hours),
        "n_clusters": int(panel.n_clusters),
    }
