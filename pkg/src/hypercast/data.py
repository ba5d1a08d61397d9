"""Charging-session ingestion, calendar features, and multi-timescale windows."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

F_RAW = 7
FEATURE_NAMES = (
    "demand",
    "month_sin",
    "month_cos",
    "dom_sin",
    "dom_cos",
    "dow_sin",
    "dow_cos",
)


class DataError(ValueError):
    """Malformed or insufficient input data."""


@dataclass(frozen=True)
class ChargingSession:
    station_id: str
    start: datetime
    energy: float

    def __post_init__(self):
        if not self.station_id:
            raise DataError("session has an empty station_id")
        if not self.energy >= 0:
            raise DataError(f"session at {self.station_id} has negative energy {self.energy}")


@dataclass(frozen=True)
class Station:
    id: str
    longitude: float
    latitude: float


@dataclass(frozen=True, eq=False)
class DemandPanel:
    """Daily demand per station (kWh/day) with the 7-channel feature tensor."""

    stations: tuple[Station, ...]
    dates: tuple[date, ...]
    demand: np.ndarray  # (N_s, T)
    features: np.ndarray = field(repr=False)  # (N_s, T, F_RAW)

    @property
    def n_stations(self) -> int:
        return len(self.stations)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def station_ids(self) -> list[str]:
        return [s.id for s in self.stations]

    @property
    def coords(self) -> np.ndarray:
        """(N_s, 2) array of (longitude, latitude)."""
        return np.array([[s.longitude, s.latitude] for s in self.stations], dtype=float)


@dataclass(frozen=True, eq=False)
class WindowSample:
    recent: np.ndarray  # (N_s, T_r, F_RAW)
    weekly: np.ndarray  # (N_s, T_w, F_RAW)
    target: np.ndarray  # (N_s, T_f)
    anchor_day: int


def _utc_day(ts: datetime) -> date:
    if ts.tzinfo is None:
        return ts.date()
    return ts.astimezone(timezone.utc).date()


def calendar_features(dates: Sequence[date]) -> np.ndarray:
    """(T, 6) sin/cos encodings of month/12, day-of-month/31, weekday/7 (Monday=0)."""
    month = np.array([d.month for d in dates], dtype=float)
    dom = np.array([d.day for d in dates], dtype=float)
    dow = np.array([d.weekday() for d in dates], dtype=float)
    cols = []
    for value, period in ((month, 12.0), (dom, 31.0), (dow, 7.0)):
        angle = 2.0 * np.pi * value / period
        cols.extend([np.sin(angle), np.cos(angle)])
    return np.stack(cols, axis=1).reshape(len(dates), 6)


def _make_panel(stations: Sequence[Station], dates: Sequence[date], demand: np.ndarray) -> DemandPanel:
    demand = np.asarray(demand, dtype=float)
    cal = calendar_features(dates)
    n = len(stations)
    features = np.empty((n, len(dates), F_RAW))
    features[:, :, 0] = demand
    features[:, :, 1:] = cal[None, :, :]
    demand = demand.copy()
    demand.flags.writeable = False
    features.flags.writeable = False
    return DemandPanel(tuple(stations), tuple(dates), demand, features)


def make_panel(stations: Sequence[Station], start: date, demand: np.ndarray) -> DemandPanel:
    """Panel over contiguous days beginning at ``start``."""
    demand = np.asarray(demand, dtype=float)
    if demand.ndim != 2 or demand.shape[0] != len(stations):
        raise DataError(f"demand shape {demand.shape} does not match {len(stations)} stations")
    dates = [start + timedelta(days=i) for i in range(demand.shape[1])]
    return _make_panel(stations, dates, demand)


def ingest_sessions(
    records: Iterable[ChargingSession],
    station_coords: Mapping[str, tuple[float, float]],
) -> tuple[DemandPanel, list[ChargingSession]]:
    """Aggregate sessions into daily (UTC) demand per station.

    Returns the panel and the sessions whose station has no coordinates.
    Stations are ordered by id; days without sessions are zero.
    """
    records = list(records)
    if not records:
        raise DataError("no charging sessions given")
    accepted, rejected = [], []
    for rec in records:
        (accepted if rec.station_id in station_coords else rejected).append(rec)
    if not accepted:
        raise DataError("every session references an unknown station")

    ids = sorted(station_coords)
    stations = [Station(i, float(station_coords[i][0]), float(station_coords[i][1])) for i in ids]
    days = [_utc_day(r.start) for r in accepted]
    first, last = min(days), max(days)
    n_days = (last - first).days + 1
    index = {sid: p for p, sid in enumerate(ids)}
    demand = np.zeros((len(ids), n_days))
    for rec, day in zip(accepted, days):
        demand[index[rec.station_id], (day - first).days] += rec.energy
    return make_panel(stations, first, demand), rejected


def impute_missing(panel: DemandPanel, missing_mask: np.ndarray) -> DemandPanel:
    """Linear interpolation across masked cells, nearest-value fill at the edges."""
    mask = np.asarray(missing_mask, dtype=bool)
    if mask.shape != panel.demand.shape:
        raise DataError(f"mask shape {mask.shape} != demand shape {panel.demand.shape}")
    if not mask.any():
        return panel
    demand = panel.demand.copy()
    t = np.arange(panel.n_days)
    for p in range(panel.n_stations):
        miss = mask[p]
        if not miss.any():
            continue
        if miss.all():
            raise DataError(f"station {panel.stations[p].id} has no observed values")
        # np.interp holds the edge values constant outside the observed range
        demand[p, miss] = np.interp(t[miss], t[~miss], demand[p, ~miss])
    return _make_panel(panel.stations, panel.dates, demand)


def min_panel_length(T_r: int, T_w: int, T_f: int) -> int:
    return max(7 * (T_w - 1) + T_f + 1, T_r + T_f)


def window_indices(anchor: int, T_r: int, T_w: int, T_f: int):
    """Day indices (recent, weekly, target) for one anchor day."""
    recent = np.arange(anchor - T_r + 1, anchor + 1)
    weekly = anchor - 7 * np.arange(T_w - 1, -1, -1)
    target = np.arange(anchor + 1, anchor + T_f + 1)
    return recent, weekly, target


def build_windows(panel: DemandPanel, T_r: int, T_w: int, T_f: int) -> list[WindowSample]:
    if min(T_r, T_w, T_f) < 1:
        raise DataError("window lengths must be positive")
    need = min_panel_length(T_r, T_w, T_f)
    if panel.n_days < need:
        raise DataError(
            f"panel has {panel.n_days} days; T_r={T_r}, T_w={T_w}, T_f={T_f} need at least {need}"
        )
    first = max(T_r - 1, 7 * (T_w - 1))
    last = panel.n_days - T_f - 1
    out = []
    for t in range(first, last + 1):
        rec, wek, tgt = window_indices(t, T_r, T_w, T_f)
        out.append(
            WindowSample(
                recent=panel.features[:, rec, :],
                weekly=panel.features[:, wek, :],
                target=panel.demand[:, tgt],
                anchor_day=t,
            )
        )
    return out


def chronological_split(samples: Sequence[WindowSample], ratio: float = 0.8):
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must lie in (0, 1), got {ratio}")
    if len(samples) < 2:
        raise DataError(f"need at least 2 samples to split, got {len(samples)}")
    ordered = sorted(samples, key=lambda s: s.anchor_day)
    cut = math.floor(ratio * len(ordered))
    return ordered[:cut], ordered[cut:]


def stack_samples(samples: Sequence[WindowSample]):
    """Batch arrays (X_rec, X_wek, Y) with a leading sample axis."""
    return (
        np.stack([s.recent for s in samples]),
        np.stack([s.weekly for s in samples]),
        np.stack([s.target for s in samples]),
    )


def synthetic_panel(
    seed: int,
    N_s: int,
    T: int,
    noise_sigma: float,
    amplitude: float = 10.0,
    start: date = date(2021, 1, 4),
) -> DemandPanel:
    """Weekly-periodic demand for stations split across two spatial clusters.

    Station p: ``base_p + A_p sin(2 pi dow / 7 + phase_p) + N(0, noise_sigma^2)``,
    with ``A_p`` within 20% of ``amplitude``.  Even stations sit near (0, 0),
    odd stations near (1, 1), each jittered by at most 0.01 degrees.
    """
    if N_s < 2:
        raise DataError("synthetic panel needs at least 2 stations")
    if T < 60:
        raise DataError("synthetic panel needs at least 60 days")
    rng = np.random.default_rng(seed)
    cluster = np.arange(N_s) % 2
    centers = np.array([[0.0, 0.0], [1.0, 1.0]])
    coords = centers[cluster] + rng.uniform(-0.01, 0.01, size=(N_s, 2))
    base = rng.uniform(2.0, 4.0, size=N_s) * amplitude
    amp = amplitude * rng.uniform(0.8, 1.2, size=N_s)
    cluster_phase = np.array([0.0, np.pi / 2])
    phase = cluster_phase[cluster] + rng.uniform(-0.3, 0.3, size=N_s)
    noise = rng.normal(0.0, 1.0, size=(N_s, T)) * noise_sigma

    dates = [start + timedelta(days=i) for i in range(T)]
    dow = np.array([d.weekday() for d in dates], dtype=float)
    wave = np.sin(2.0 * np.pi * dow[None, :] / 7.0 + phase[:, None])
    demand = base[:, None] + amp[:, None] * wave + noise
    stations = [
        Station(f"S{p:03d}", float(coords[p, 0]), float(coords[p, 1])) for p in range(N_s)
    ]
    return _make_panel(stations, dates, demand)


# ---------------------------------------------------------------------------
# file formats


def read_sessions_csv(path) -> list[ChargingSession]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"station_id", "start_iso8601", "energy_kwh"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                start = datetime.fromisoformat(row["start_iso8601"].replace("Z", "+00:00"))
                out.append(ChargingSession(row["station_id"].strip(), start, float(row["energy_kwh"])))
            except (ValueError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def read_stations_csv(path) -> dict[str, tuple[float, float]]:
    coords = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"station_id", "longitude", "latitude"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            coords[row["station_id"].strip()] = (float(row["longitude"]), float(row["latitude"]))
    return coords


def write_panel(panel: DemandPanel, csv_path) -> Path:
    """Write days x stations CSV plus a ``.json`` sidecar; returns the sidecar path."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date", *panel.station_ids])
        for t, day in enumerate(panel.dates):
            writer.writerow([day.isoformat(), *(repr(float(v)) for v in panel.demand[:, t])])
    sidecar = csv_path.with_suffix(".json")
    meta = {
        "stations": [
            {"station_id": s.id, "longitude": s.longitude, "latitude": s.latitude}
            for s in panel.stations
        ],
        "start_date": panel.dates[0].isoformat(),
        "end_date": panel.dates[-1].isoformat(),
        "n_days": panel.n_days,
        "units": "kWh/day",
        "day_boundary": "UTC",
        "feature_layout": list(FEATURE_NAMES),
    }
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")
    return sidecar


def read_panel(csv_path) -> DemandPanel:
    csv_path = Path(csv_path)
    sidecar = csv_path.with_suffix(".json")
    if not sidecar.exists():
        raise DataError(f"panel sidecar {sidecar} not found")
    meta = json.loads(sidecar.read_text())
    stations = [Station(s["station_id"], float(s["longitude"]), float(s["latitude"])) for s in meta["stations"]]
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[1:] != [s.id for s in stations]:
        raise DataError(f"{csv_path}: station columns disagree with sidecar")
    dates = [date.fromisoformat(r[0]) for r in body]
    for a, b in zip(dates, dates[1:]):
        if (b - a).days != 1:
            raise DataError(f"{csv_path}: dates not contiguous at {a} -> {b}")
    demand = np.array([[float(v) for v in r[1:]] for r in body], dtype=float).T
    return _make_panel(stations, dates, demand.reshape(len(stations), len(dates)))
