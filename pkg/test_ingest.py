import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), "src"))

from domain import RegionGrid
from errors import EmptyAfterFilter, ParseError, SchemaError
from ingest import ingest_csv, project_lonlat, write_csv
from synth import SimConfig, simulate


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_minimal_file(tmp_path):
    path = _write(tmp_path, "station_id,x_km,y_km,day,pm25,aod\nA,0,0,1,10.5,0.2\nB,5,5,1,12.0,0.3\n")
    data = ingest_csv(path, min_per_day=1, min_per_station=1)
    assert len(data) == 2
    assert [s.id for s in data.stations] == ["A", "B"]
    assert data.day_labels == ("1",)
    np.testing.assert_allclose(data.pm, [10.5, 12.0])


def test_missing_column_is_named(tmp_path):
    path = _write(tmp_path, "station_id,x_km,y_km,day,pm25\nA,0,0,1,10.5\n")
    with pytest.raises(SchemaError) as info:
        ingest_csv(path, 1, 1)
    assert info.value.column == "aod"


def test_bad_number_reports_line(tmp_path):
    path = _write(tmp_path, "station_id,x_km,y_km,day,pm25,aod\nA,0,0,1,1,0\nA,0,0,2,2,0\nA,0,0,3,abc,0\n")
    with pytest.raises(ParseError) as info:
        ingest_csv(path, 1, 1)
    assert info.value.line == 4


def test_station_changing_coordinates_is_rejected(tmp_path):
    path = _write(tmp_path, "station_id,x_km,y_km,day,pm25,aod\nA,0,0,1,1,0\nA,1,0,2,2,0\n")
    with pytest.raises(ParseError) as info:
        ingest_csv(path, 1, 1)
    assert info.value.line == 3


def test_region_column_wins_over_grid(tmp_path):
    path = _write(tmp_path, "station_id,x_km,y_km,region_id,day,pm25,aod\nA,0,0,7,1,1,0\nB,90,0,7,1,2,0\n")
    data = ingest_csv(path, 1, 1, region_grid=RegionGrid(10.0))
    assert [s.region for s in data.stations] == [7, 7]

    path = _write(tmp_path, "station_id,x_km,y_km,day,pm25,aod\nA,0,0,1,1,0\nB,90,0,1,2,0\n", name="nogrid.csv")
    grid = RegionGrid(10.0)
    data = ingest_csv(path, 1, 1, region_grid=grid)
    assert [s.region for s in data.stations] == [grid.region_of(0, 0), grid.region_of(90, 0)]


def test_extra_columns_are_covariates_and_days_sort_numerically(tmp_path):
    path = _write(
        tmp_path,
        "station_id,x_km,y_km,day,pm25,aod,temp\nA,0,0,10,1,0,20\nA,0,0,9,2,0,21\nA,0,0,100,3,0,22\n",
    )
    data = ingest_csv(path, 1, 1)
    assert data.covariate_names == ("temp",)
    assert data.day_labels == ("9", "10", "100")
    np.testing.assert_allclose(data.covariates[:, 0], [21.0, 20.0, 22.0])


def test_filtering_applies(tmp_path):
    path = _write(tmp_path, "station_id,x_km,y_km,day,pm25,aod\nA,0,0,1,1,0\nB,1,1,2,1,0\n")
    with pytest.raises(EmptyAfterFilter):
        ingest_csv(path, min_per_day=2, min_per_station=1)


def test_lonlat_projection():
    x, y = project_lonlat([1.0], [0.0], 0.0)
    assert x[0] == pytest.approx(111.320)
    assert y[0] == 0.0
    x, _ = project_lonlat([1.0], [60.0], 60.0)
    assert x[0] == pytest.approx(55.66, abs=1e-3)
    with pytest.raises(ValueError):
        project_lonlat([0.0], [89.5], 0.0)


def test_lonlat_columns_are_projected(tmp_path):
    path = _write(tmp_path, "station_id,lon,lat,day,pm25,aod\nA,1,0,1,1,0\nB,0,1,1,2,0\n")
    data = ingest_csv(path, 1, 1, lat0=0.0)
    np.testing.assert_allclose(data.station_xy, [[111.320, 0.0], [0.0, 110.574]])
    with pytest.raises(SchemaError):
        ingest_csv(path, 1, 1)


def test_simulated_panel_survives_csv(tmp_path):
    data, _ = simulate(SimConfig(n_stations=9, n_days=3, n_covariates=1, seed=12))
    path = write_csv(data, str(tmp_path / "sim.csv"))
    back = ingest_csv(path, 1, 1)
    assert back.stations == data.stations
    assert back.day_labels == data.day_labels
    assert back.covariate_names == data.covariate_names
    np.testing.assert_array_equal(back.day, data.day)
    np.testing.assert_array_equal(back.pm, data.pm)
    np.testing.assert_array_equal(back.aod, data.aod)
    np.testing.assert_array_equal(back.covariates, data.covariates)


def test_numbers_parse_to_the_nearest_double(tmp_path):
    rng = np.random.default_rng(5)
    values = rng.uniform(0.0, 100.0, size=200)
    lines = ["station_id,x_km,y_km,day,pm25,aod"]
    lines += [f"S{i:03d},{repr(v)},0.0,1,{repr(v)},0.0" for i, v in enumerate(values.tolist())]
    path = _write(tmp_path, "\n".join(lines) + "\n")
    data = ingest_csv(path, 1, 1)
    assert data.station_xy[:, 0].tolist() == values.tolist()
    assert sorted(data.pm.tolist()) == sorted(values.tolist())


def test_larger_simulated_panel_is_field_exact(tmp_path):
    data, _ = simulate(SimConfig(n_stations=40, n_days=3, seed=7))
    back = ingest_csv(write_csv(data, str(tmp_path / "sim.csv")), 1, 1)
    np.testing.assert_array_equal(back.station_xy, data.station_xy)
    np.testing.assert_array_equal(back.pm, data.pm)
    np.testing.assert_array_equal(back.aod, data.aod)
