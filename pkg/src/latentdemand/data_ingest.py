"""Trip and station input handling plus desk-scale synthetic data.

File formats
------------
trips CSV    header ``vehicle_id,start_time,end_time,start_lat,start_lon,end_lat,end_lon,distance_km``
stations CSV header ``station_id,lat,lon,power_kw,plugs``

Timestamps are ISO-8601 UTC in files and integer epoch seconds in memory.
The synthetic generator stands in for real trip logs: each vehicle runs
home/work commutes on weekdays plus Poisson errands, which yields the
morning/afternoon peak structure the downstream queue replay needs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .errors import ValidationError
from .spatial_graph import haversine

TRIPS_HEADER = ["vehicle_id", "start_time", "end_time", "start_lat", "start_lon", "end_lat", "end_lon", "distance_km"]
STATIONS_HEADER = ["station_id", "lat", "lon", "power_kw", "plugs"]


@dataclass(frozen=True)
class Trip:
    vehicle_id: str
    start_time: int  # epoch seconds, UTC
    end_time: int
    start_lat: float
    start_lon: float
    end_lat: float
    end_lon: float
    distance_km: float


@dataclass(frozen=True)
class Station:
    station_id: str
    lat: float
    lon: float
    power_kw: float
    plugs: int


@dataclass(frozen=True)
class EVModelSpec:
    name: str
    market_count: int
    range_km: float
    capacity_kwh: float


@dataclass
class EVehicle:
    vehicle_id: str
    spec: EVModelSpec
    soc: float  # state of charge, fraction of capacity in [0, 1]


# Ten most common EV models plus a pooled remainder; counts are national
# registration figures used as market-share weights for fleet sampling.
DEFAULT_MARKET = [
    EVModelSpec("Tesla Model 3 SR", 8183, 380.0, 57.0),
    EVModelSpec("Renault Zoe", 4050, 315.0, 52.0),
    EVModelSpec("Tesla Model S", 3915, 560.0, 95.0),
    EVModelSpec("Volkswagen ID.3", 3353, 350.0, 58.0),
    EVModelSpec("Nissan Leaf", 3033, 225.0, 37.0),
    EVModelSpec("Hyundai Kona BEV", 2948, 395.0, 64.0),
    EVModelSpec("Volkswagen ID.4", 2473, 400.0, 77.0),
    EVModelSpec("Kia Niro EV", 1890, 370.0, 64.0),
    EVModelSpec("BMW i3", 1642, 235.0, 37.9),
    EVModelSpec("Volkswagen e-Up!", 1370, 205.0, 32.3),
    EVModelSpec("Others", 17399, 313.0, 60.0),
]


def parse_timestamp(text: str) -> int:
    """ISO-8601 -> epoch seconds. Naive timestamps are taken as UTC."""
    raw = text.strip()
    try:
        dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    except ValueError as exc:
        raise ValidationError(f"bad timestamp {text!r}: {exc}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _check_header(row, expected, path):
    if row != expected:
        raise ValidationError(f"{path}: expected header {','.join(expected)}, got {','.join(row or [])}")


def load_trips(path) -> list[Trip]:
    """Parse and validate a trips CSV, returned sorted by start time.

    Raises ValidationError naming the offending line on malformed rows and
    on overlapping trips for a single vehicle.
    """
    trips: list[Trip] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _check_header(header, TRIPS_HEADER, path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(TRIPS_HEADER):
                raise ValidationError(f"{path}:{lineno}: expected {len(TRIPS_HEADER)} fields, got {len(row)}")
            try:
                trip = Trip(
                    vehicle_id=row[0],
                    start_time=parse_timestamp(row[1]),
                    end_time=parse_timestamp(row[2]),
                    start_lat=float(row[3]),
                    start_lon=float(row[4]),
                    end_lat=float(row[5]),
                    end_lon=float(row[6]),
                    distance_km=float(row[7]),
                )
            except (ValueError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if trip.end_time < trip.start_time:
                raise ValidationError(f"{path}:{lineno}: end_time before start_time")
            if trip.distance_km < 0:
                raise ValidationError(f"{path}:{lineno}: negative distance_km")
            for lat, lon in ((trip.start_lat, trip.start_lon), (trip.end_lat, trip.end_lon)):
                if not (-90 <= lat <= 90 and -180 <= lon <= 180):
                    raise ValidationError(f"{path}:{lineno}: coordinates out of range")
            trips.append(trip)
    trips.sort(key=lambda t: (t.start_time, t.vehicle_id))
    _check_no_overlap(trips)
    return trips


def _check_no_overlap(trips: list[Trip]) -> None:
    last_end: dict[str, int] = {}
    for t in trips:
        prev = last_end.get(t.vehicle_id)
        if prev is not None and t.start_time < prev:
            raise ValidationError(f"vehicle {t.vehicle_id}: overlapping trips (starts at "
                                  f"{format_timestamp(t.start_time)} before previous trip ends)")
        last_end[t.vehicle_id] = t.end_time


def save_trips(trips, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRIPS_HEADER)
        for t in trips:
            w.writerow([t.vehicle_id, format_timestamp(t.start_time), format_timestamp(t.end_time),
                        repr(t.start_lat), repr(t.start_lon), repr(t.end_lat), repr(t.end_lon),
                        repr(t.distance_km)])


def load_stations(path) -> list[Station]:
    """Parse and validate a stations CSV."""
    stations: list[Station] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _check_header(header, STATIONS_HEADER, path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(STATIONS_HEADER):
                raise ValidationError(f"{path}:{lineno}: expected {len(STATIONS_HEADER)} fields, got {len(row)}")
            try:
                st = Station(row[0], float(row[1]), float(row[2]), float(row[3]), int(row[4]))
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if st.station_id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate station_id {st.station_id!r}")
            if st.power_kw <= 0:
                raise ValidationError(f"{path}:{lineno}: power_kw must be > 0")
            if st.plugs < 1:
                raise ValidationError(f"{path}:{lineno}: plugs must be >= 1")
            if not (-90 <= st.lat <= 90 and -180 <= st.lon <= 180):
                raise ValidationError(f"{path}:{lineno}: coordinates out of range")
            seen.add(st.station_id)
            stations.append(st)
    return stations


def save_stations(stations, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATIONS_HEADER)
        for s in stations:
            w.writerow([s.station_id, repr(s.lat), repr(s.lon), repr(s.power_kw), s.plugs])


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic commute generator.

    bbox is (lat_min, lon_min, lat_max, lon_max). ``start_date`` anchors day
    zero (a Monday by default, so weekday/weekend structure is stable).
    """

    n_vehicles: int = 100
    n_days: int = 7
    bbox: tuple[float, float, float, float] = (55.60, 12.45, 55.75, 12.65)
    start_date: str = "2019-09-02"
    morning_peak_hour: float = 8.0
    evening_peak_hour: float = 17.0
    peak_std_hours: float = 0.75
    errands_per_day: float = 0.4
    mean_speed_kmh: float = 30.0
    route_factor: float = 1.3
    seed: int = 0


def _day_start_epoch(cfg: SynthConfig) -> int:
    dt = datetime.fromisoformat(cfg.start_date).replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def generate_synthetic_trips(config: SynthConfig, seed: int | None = None) -> list[Trip]:
    """Deterministic synthetic trip log with commute peaks.

    Each vehicle gets a home and a work location inside the bounding box;
    weekdays produce a morning and an evening commute (clipped normal around
    the peak hours) plus Poisson-count errands, weekends errands only. Trips
    per vehicle never overlap and stay inside their day.
    """
    if seed is None:
        seed = config.seed
    if config.n_vehicles == 0:
        return []
    if config.n_vehicles < 0 or config.n_days < 1:
        raise ValidationError("n_vehicles must be >= 0 and n_days >= 1")
    lat_min, lon_min, lat_max, lon_max = config.bbox
    if not (lat_min < lat_max and lon_min < lon_max):
        raise ValidationError(f"degenerate bbox {config.bbox}")
    rng = np.random.default_rng(seed)
    base = _day_start_epoch(config)
    start_dow = datetime.fromisoformat(config.start_date).weekday()
    trips: list[Trip] = []

    def clip_point(lat, lon):
        return (float(min(max(lat, lat_min), lat_max)), float(min(max(lon, lon_min), lon_max)))

    for v in range(config.n_vehicles):
        vid = f"v{v:05d}"
        home = (rng.uniform(lat_min, lat_max), rng.uniform(lon_min, lon_max))
        work = clip_point(home[0] + rng.normal(0, 0.03), home[1] + rng.normal(0, 0.05))
        for day in range(config.n_days):
            weekday = (start_dow + day) % 7 < 5
            day_base = base + day * 86400
            legs = []  # (start_hour, origin, dest)
            if weekday:
                legs.append((rng.normal(config.morning_peak_hour, config.peak_std_hours), home, work))
                legs.append((rng.normal(config.evening_peak_hour, config.peak_std_hours), work, home))
            n_errands = rng.poisson(config.errands_per_day if weekday else 2 * config.errands_per_day)
            for _ in range(n_errands):
                spot = clip_point(home[0] + rng.normal(0, 0.02), home[1] + rng.normal(0, 0.03))
                t0 = rng.uniform(10.0, 21.0)
                legs.append((t0, home, spot))
                legs.append((t0 + rng.uniform(0.4, 1.5), spot, home))
            legs.sort(key=lambda leg: leg[0])
            cursor = 0.0  # earliest allowed start hour, keeps trips disjoint
            for start_hour, origin, dest in legs:
                dist = haversine(origin[0], origin[1], dest[0], dest[1]) * config.route_factor
                dist = max(dist, 0.5)
                duration_h = dist / config.mean_speed_kmh
                start_h = min(max(start_hour, cursor), 24.0 - duration_h - 1e-3)
                if start_h < cursor:  # day too full to fit this leg
                    continue
                start_ts = day_base + int(round(start_h * 3600))
                end_ts = start_ts + max(1, int(round(duration_h * 3600)))
                trips.append(Trip(vid, start_ts, end_ts, origin[0], origin[1], dest[0], dest[1],
                                  round(dist, 3)))
                cursor = start_h + duration_h + 0.1
    trips.sort(key=lambda t: (t.start_time, t.vehicle_id))
    return trips


def generate_synthetic_stations(n_stations: int, bbox=(55.60, 12.45, 55.75, 12.65),
                                seed: int = 0) -> list[Station]:
    """Uniformly placed stations with a realistic power mix, for desk runs."""
    if n_stations < 1:
        raise ValidationError("n_stations must be >= 1")
    rng = np.random.default_rng(seed)
    lat_min, lon_min, lat_max, lon_max = bbox
    powers = np.array([3.7, 11.0, 22.0, 50.0, 150.0])
    power_probs = np.array([0.15, 0.3, 0.35, 0.15, 0.05])
    stations = []
    for i in range(n_stations):
        stations.append(Station(
            station_id=f"s{i:04d}",
            lat=float(rng.uniform(lat_min, lat_max)),
            lon=float(rng.uniform(lon_min, lon_max)),
            power_kw=float(powers[rng.choice(len(powers), p=power_probs)]),
            plugs=int(rng.integers(1, 5)),
        ))
    return stations


SOC_INIT_MEAN = 0.6
SOC_INIT_STD = 0.2
SOC_INIT_LOW = 0.20
SOC_INIT_HIGH = 1.0


def sample_initial_soc(n: int, rng: np.random.Generator) -> np.ndarray:
    """Normal(0.6, 0.2) rejection-sampled into [0.20, 1.0]."""
    out = np.empty(n)
    filled = 0
    while filled < n:
        draws = rng.normal(SOC_INIT_MEAN, SOC_INIT_STD, size=max(64, 2 * (n - filled)))
        ok = draws[(draws >= SOC_INIT_LOW) & (draws <= SOC_INIT_HIGH)]
        take = min(len(ok), n - filled)
        out[filled:filled + take] = ok[:take]
        filled += take
    return out


def sample_fleet(vehicle_ids, market: list[EVModelSpec] | None = None,
                 seed: int = 0) -> dict[str, EVehicle]:
    """Assign each vehicle a model (probability proportional to market
    count) and an initial state of charge. Reproducible for a fixed seed."""
    if market is None:
        market = DEFAULT_MARKET
    if not market:
        raise ValidationError("market must be non-empty")
    counts = np.array([m.market_count for m in market], dtype=float)
    if counts.sum() <= 0:
        raise ValidationError("all market counts are zero")
    if any(m.range_km <= 0 or m.capacity_kwh <= 0 for m in market):
        raise ValidationError("market specs need positive range_km and capacity_kwh")
    vehicle_ids = list(vehicle_ids)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(market), size=len(vehicle_ids), p=counts / counts.sum())
    socs = sample_initial_soc(len(vehicle_ids), rng)
    return {vid: EVehicle(vid, market[int(j)], float(s))
            for vid, j, s in zip(vehicle_ids, picks, socs)}
