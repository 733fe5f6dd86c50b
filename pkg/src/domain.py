"""Core data model: stations, observations and the station/day panel."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
import logging
import math
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from errors import DuplicateKey, EmptyAfterFilter, InvalidSplit, NonFinite, UnknownStation


logger = logging.getLogger(__name__)

BASE_COLUMNS = ("station_id", "day", "pm25", "aod")


@dataclass(frozen=True)
class Station:
    id: str
    x: float
    y: float
    region: Optional[int] = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise NonFinite(f"station {self.id!r} has non-finite coordinates ({self.x}, {self.y})")


@dataclass(frozen=True)
class Observation:
    station: str
    day: int
    pm: float
    aod: float
    covariates: Tuple[float, ...] = ()


@dataclass(frozen=True)
class RegionGrid:
    """Square-cell tessellation supplying region ids; cells are half-open [a, a + size)."""

    cell_size: float
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")

    def cell_of(self, x: float, y: float) -> Tuple[int, int]:
        i = math.floor((x - self.origin[0]) / self.cell_size)
        j = math.floor((y - self.origin[1]) / self.cell_size)
        return int(i), int(j)

    def region_of(self, x: float, y: float) -> int:
        return _pair(*self.cell_of(x, y))


def _pair(i: int, j: int) -> int:
    # zigzag to non-negative, then Szudzik pairing: a unique int per cell
    a = 2 * i if i >= 0 else -2 * i - 1
    b = 2 * j if j >= 0 else -2 * j - 1
    return a * a + a + b if a >= b else a + b * b


@dataclass(frozen=True, eq=False)
class Dataset:
    """Station/day panel.

    ``frame`` holds one row per observation with columns ``station_id``, ``day``,
    ``pm25``, ``aod`` and one column per covariate, sorted by (day, station order).
    Days are integer indices into ``day_labels`` (1-based); subsets produced by
    splitting keep the parent's day numbering.
    """

    stations: Tuple[Station, ...]
    frame: pd.DataFrame
    covariate_names: Tuple[str, ...] = ()
    day_labels: Tuple[str, ...] = ()

    @classmethod
    def build(
        cls,
        stations: Sequence[Station],
        frame: pd.DataFrame,
        covariate_names: Sequence[str] = (),
        day_labels: Optional[Sequence[str]] = None,
    ) -> "Dataset":
        covariate_names = tuple(covariate_names)
        frame = frame.loc[:, [*BASE_COLUMNS, *covariate_names]].copy()
        frame["station_id"] = frame["station_id"].astype(str)
        frame["day"] = frame["day"].astype(np.int64)
        for col in ("pm25", "aod", *covariate_names):
            frame[col] = frame[col].astype(float)

        ids = [s.id for s in stations]
        if len(set(ids)) != len(ids):
            raise DuplicateKey("station ids are not unique")
        order = {sid: k for k, sid in enumerate(ids)}
        unknown = set(frame["station_id"]) - set(order)
        if unknown:
            raise UnknownStation(f"observations reference unknown stations: {sorted(unknown)[:5]}")
        dup = frame.duplicated(["station_id", "day"])
        if dup.any():
            row = frame.loc[dup].iloc[0]
            raise DuplicateKey(f"repeated (station, day) pair ({row['station_id']}, {row['day']})")
        values = frame.loc[:, ["pm25", "aod", *covariate_names]].to_numpy()
        if not np.isfinite(values).all():
            raise NonFinite("pm25, aod and covariates must be finite")

        if day_labels is None:
            top = int(frame["day"].max()) if len(frame) else 0
            day_labels = [str(d) for d in range(1, top + 1)]

        frame = (
            frame.assign(_order=frame["station_id"].map(order))
            .sort_values(["day", "_order"], kind="mergesort")
            .drop(columns="_order")
            .reset_index(drop=True)
        )
        return cls(tuple(stations), frame, covariate_names, tuple(day_labels))

    # -----------------------
    # Shape
    # -----------------------

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def day_count(self) -> int:
        return len(self.day_labels)

    @property
    def region_count(self) -> int:
        return len({s.region for s in self.stations})

    @property
    def observed_days(self) -> np.ndarray:
        return np.unique(self.frame["day"].to_numpy())

    @cached_property
    def station_lookup(self) -> Dict[str, Station]:
        return {s.id: s for s in self.stations}

    def observations(self) -> Iterator[Observation]:
        covs = self.frame.loc[:, list(self.covariate_names)].to_numpy()
        for k, row in enumerate(self.frame.itertuples(index=False)):
            yield Observation(row.station_id, int(row.day), float(row.pm25), float(row.aod), tuple(covs[k]))

    # -----------------------
    # Row-aligned arrays
    # -----------------------

    @cached_property
    def station_index(self) -> np.ndarray:
        order = {s.id: k for k, s in enumerate(self.stations)}
        return self.frame["station_id"].map(order).to_numpy(dtype=np.int64)

    @cached_property
    def station_xy(self) -> np.ndarray:
        return np.array([(s.x, s.y) for s in self.stations], dtype=float).reshape(-1, 2)

    @property
    def xy(self) -> np.ndarray:
        return self.station_xy[self.station_index]

    @property
    def day(self) -> np.ndarray:
        return self.frame["day"].to_numpy(dtype=np.int64)

    @property
    def pm(self) -> np.ndarray:
        return self.frame["pm25"].to_numpy(dtype=float)

    @property
    def aod(self) -> np.ndarray:
        return self.frame["aod"].to_numpy(dtype=float)

    @property
    def covariates(self) -> np.ndarray:
        return self.frame.loc[:, list(self.covariate_names)].to_numpy(dtype=float).reshape(len(self), -1)

    @property
    def region(self) -> np.ndarray:
        regions = np.array([-1 if s.region is None else s.region for s in self.stations], dtype=np.int64)
        return regions[self.station_index]

    # -----------------------
    # Subsets
    # -----------------------

    def take(self, rows: Iterable[int]) -> "Dataset":
        """Row subset keeping the station list and day numbering."""
        rows = np.sort(np.asarray(list(rows), dtype=np.int64))
        return Dataset(self.stations, self.frame.iloc[rows].reset_index(drop=True), self.covariate_names, self.day_labels)

    def restrict_stations(self, keep: Set[str]) -> "Dataset":
        stations = tuple(s for s in self.stations if s.id in keep)
        frame = self.frame.loc[self.frame["station_id"].isin(keep)].reset_index(drop=True)
        return Dataset(stations, frame, self.covariate_names, self.day_labels)

    def with_stations(self, stations: Sequence[Station]) -> "Dataset":
        if [s.id for s in stations] != [s.id for s in self.stations]:
            raise UnknownStation("replacement station list must keep ids and order")
        return replace(self, stations=tuple(stations))

    def equals(self, other: "Dataset") -> bool:
        return (
            self.stations == other.stations
            and self.covariate_names == other.covariate_names
            and self.day_labels == other.day_labels
            and self.frame.equals(other.frame)
        )


# -----------------------
# Operations
# -----------------------

def validate_dataset(raw: Dataset, min_per_day: int = 30, min_per_station: int = 30) -> Dataset:
    """Drop sparse days, then sparse stations, until nothing changes; re-index days 1..T."""
    frame = raw.frame
    rounds = 0
    while True:
        rounds += 1
        before = len(frame)
        per_day = frame.groupby("day")["station_id"].transform("size")
        frame = frame.loc[per_day >= min_per_day]
        per_station = frame.groupby("station_id")["day"].transform("size")
        frame = frame.loc[per_station >= min_per_station]
        if len(frame) == before or frame.empty:
            break

    if frame.empty:
        raise EmptyAfterFilter(
            f"no observations survive min_per_day={min_per_day}, min_per_station={min_per_station}"
        )

    days = np.sort(frame["day"].unique())
    remap = {int(d): k + 1 for k, d in enumerate(days)}
    labels = tuple(raw.day_labels[int(d) - 1] for d in days) if raw.day_labels else tuple(str(d) for d in days)
    frame = frame.assign(day=frame["day"].map(remap).astype(np.int64)).reset_index(drop=True)

    present = set(frame["station_id"])
    stations = tuple(s for s in raw.stations if s.id in present)
    dropped = len(raw) - len(frame)
    if dropped:
        logger.info(
            "Filtering removed %d of %d rows in %d rounds (%d stations, %d days kept)",
            dropped, len(raw), rounds, len(stations), len(days),
        )
    return Dataset(stations, frame, raw.covariate_names, labels)


def assign_regions(stations: Sequence[Station], grid: RegionGrid) -> List[Station]:
    return [s if s.region is not None else replace(s, region=grid.region_of(s.x, s.y)) for s in stations]


def split_by_stations(
    data: Dataset, test_stations: Set[str], dropped_stations: Set[str] = frozenset()
) -> Tuple[Dataset, Dataset]:
    test_stations, dropped_stations = set(test_stations), set(dropped_stations)
    known = set(data.station_lookup)
    unknown = (test_stations | dropped_stations) - known
    if unknown:
        raise UnknownStation(f"unknown station ids: {sorted(unknown)[:5]}")
    overlap = test_stations & dropped_stations
    if overlap:
        raise InvalidSplit(f"stations both tested and dropped: {sorted(overlap)[:5]}")
    train_ids = known - test_stations - dropped_stations
    return data.restrict_stations(train_ids), data.restrict_stations(test_stations)
