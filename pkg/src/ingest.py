from __future__ import annotations

import logging
import math
import os
import re
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from domain import Dataset, RegionGrid, Station, assign_regions, validate_dataset
from errors import ParseError, SchemaError
from export import atomic_open


logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("station_id", "x_km", "y_km", "day", "pm25", "aod")
OPTIONAL_COLUMNS = ("region_id",)
LONLAT_COLUMNS = ("lon", "lat")

# equirectangular km per degree
KM_PER_DEG_LON = 111.320
KM_PER_DEG_LAT = 110.574


def project_lonlat(lon, lat, lat0: float) -> Tuple[np.ndarray, np.ndarray]:
    """Equirectangular projection to km around the reference latitude ``lat0``."""
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    if np.any(np.abs(lat) >= 89.0) or abs(lat0) >= 89.0:
        raise ValueError("latitudes must satisfy |lat| < 89")
    x = KM_PER_DEG_LON * math.cos(math.radians(lat0)) * lon
    y = KM_PER_DEG_LAT * lat
    return x, y


def ingest_csv(
    path: str,
    min_per_day: int = 30,
    min_per_station: int = 30,
    region_grid: Optional[RegionGrid] = None,
    lat0: Optional[float] = None,
) -> Dataset:
    """Read a station/day CSV into a validated Dataset.

    Required columns are station_id, x_km, y_km, day, pm25 and aod; lon/lat may
    replace x_km/y_km when ``lat0`` is given. A region_id column takes precedence
    over ``region_grid``. Every other column is a covariate.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise SchemaError("station_id") from None
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        raise ParseError(int(match.group(1)) if match else 0, str(exc)) from None
    raw.columns = [c.strip() for c in raw.columns]

    use_lonlat = "x_km" not in raw.columns and lat0 is not None and set(LONLAT_COLUMNS) <= set(raw.columns)
    required = [c for c in REQUIRED_COLUMNS if not (use_lonlat and c in ("x_km", "y_km"))]
    for column in required:
        if column not in raw.columns:
            raise SchemaError(column)
    if use_lonlat:
        required += list(LONLAT_COLUMNS)
    covariates = [c for c in raw.columns if c not in (*required, *OPTIONAL_COLUMNS, *LONLAT_COLUMNS)]

    raw["station_id"] = raw["station_id"].str.strip()
    if (raw["station_id"] == "").any():
        raise ParseError(_line(raw.index[raw["station_id"] == ""][0]), "empty station_id")
    numeric = {c: _numeric(raw, c) for c in (*required, *covariates) if c not in ("station_id", "day")}
    if use_lonlat:
        numeric["x_km"], numeric["y_km"] = project_lonlat(numeric.pop("lon"), numeric.pop("lat"), lat0)

    regions = _integers(raw, "region_id") if "region_id" in raw.columns else None
    day, labels = _days(raw["day"])
    stations = _stations(raw["station_id"].to_numpy(), numeric["x_km"], numeric["y_km"], regions)
    if regions is None and region_grid is not None:
        stations = assign_regions(stations, region_grid)

    frame = pd.DataFrame({
        "station_id": raw["station_id"].to_numpy(),
        "day": day,
        "pm25": numeric["pm25"],
        "aod": numeric["aod"],
        **{c: numeric[c] for c in covariates},
    })
    data = Dataset.build(stations, frame, covariates, labels)
    logger.info("Read %d rows, %d stations, %d days from %s", len(data), len(stations), len(labels), path)
    return validate_dataset(data, min_per_day, min_per_station)


def write_csv(data: Dataset, path: str) -> str:
    """Write ``data`` in the schema ``ingest_csv`` reads."""
    lookup = data.station_lookup
    ids = data.frame["station_id"]
    frame = pd.DataFrame({
        "station_id": ids,
        "x_km": ids.map(lambda s: lookup[s].x),
        "y_km": ids.map(lambda s: lookup[s].y),
    })
    if all(s.region is not None for s in data.stations):
        frame["region_id"] = ids.map(lambda s: lookup[s].region).astype(np.int64)
    labels = np.asarray(data.day_labels, dtype=object)
    frame["day"] = labels[data.day - 1]
    for column in ("pm25", "aod", *data.covariate_names):
        frame[column] = data.frame[column]
    with atomic_open(path) as f:
        frame.to_csv(f, index=False, lineterminator="\n")
    return path


# -----------------------
# Helpers
# -----------------------

def _line(index: int) -> int:
    # header is line 1
    return int(index) + 2


def _to_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return np.nan


def _numeric(raw: pd.DataFrame, column: str) -> np.ndarray:
    # float() is correctly rounded; pandas' fast parser can be 1 ULP off
    values = raw[column].str.strip().map(_to_float).to_numpy(dtype=float)
    bad = ~np.isfinite(values)
    if bad.any():
        first = raw.index[bad][0]
        raise ParseError(_line(first), f"column {column}: {raw.at[first, column]!r} is not a finite number")
    return values


def _integers(raw: pd.DataFrame, column: str) -> np.ndarray:
    values = _numeric(raw, column)
    fractional = values != np.round(values)
    if fractional.any():
        first = raw.index[fractional][0]
        raise ParseError(_line(first), f"column {column}: {raw.at[first, column]!r} is not an integer")
    return values.astype(np.int64)


def _days(column: pd.Series) -> Tuple[np.ndarray, List[str]]:
    """Day indices 1..T over the sorted distinct labels; integer labels sort numerically."""
    text = column.str.strip()
    if (text == "").any():
        raise ParseError(_line(text.index[text == ""][0]), "empty day")
    as_int = pd.to_numeric(text, errors="coerce")
    if as_int.notna().all() and (as_int == np.round(as_int)).all():
        keys = as_int.astype(np.int64)
        distinct = sorted(set(keys))
        labels = [str(d) for d in distinct]
    else:
        keys = text
        distinct = sorted(set(keys))
        labels = list(distinct)
    index = {d: k + 1 for k, d in enumerate(distinct)}
    return keys.map(index).to_numpy(dtype=np.int64), labels


def _stations(
    ids: np.ndarray, x: np.ndarray, y: np.ndarray, regions: Optional[np.ndarray]
) -> List[Station]:
    """One station per id in order of first appearance; repeated rows must agree."""
    seen: Dict[str, int] = {}
    stations: List[Station] = []
    for row, sid in enumerate(ids):
        first = seen.get(sid)
        if first is None:
            seen[sid] = row
            region = None if regions is None else int(regions[row])
            stations.append(Station(sid, float(x[row]), float(y[row]), region))
            continue
        if x[row] != x[first] or y[row] != y[first]:
            raise ParseError(_line(row), f"station {sid} changes coordinates")
        if regions is not None and regions[row] != regions[first]:
            raise ParseError(_line(row), f"station {sid} changes region_id")
    return stations
