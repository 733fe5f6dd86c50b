import os
import sys

import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), "src"))

from config import CvScheme, RunConfig, thread_count
from errors import ConfigError


def _config_file(tmp_path, text):
    path = tmp_path / "run.env"
    path.write_text(text)
    return str(path)


def test_defaults():
    cfg = RunConfig()
    assert cfg.models == ("lmm", "gmrf")
    assert cfg.n_iter == 10
    assert [s.label for s in cfg.cv_schemes] == ["kfold:10"]
    assert cfg.h_list == (0.0, 25.0, 50.0, 100.0, 150.0)


def test_file_then_overrides(tmp_path):
    path = _config_file(
        tmp_path,
        "# run settings\nMODELS=lmm,mean\nCV_SCHEMES=kfold:5,lpo:3:25\nH_LIST=0,10\nSEED=4\nmesh_max_edge_km = 12.5\n",
    )
    cfg = RunConfig.from_file(path, {"seed": 9, "models": None})
    assert cfg.models == ("lmm", "mean")
    assert cfg.seed == 9
    assert cfg.h_list == (0.0, 10.0)
    assert cfg.mesh_max_edge_km == 12.5
    assert cfg.cv_schemes == (CvScheme("kfold", k=5), CvScheme("lpo", p=3, h=25.0))
    assert cfg.to_dict()["cv_schemes"] == ["kfold:5", "lpo:3:25"]


@pytest.mark.parametrize(
    "text",
    [
        "NOT_A_KEY=1\n",
        "CV_SCHEMES=kfold\n",
        "CV_SCHEMES=kfold:1\n",
        "H_LIST=50,0\n",
        "MODELS=lmm,spline\n",
        "MIN_PER_DAY=zero\n",
    ],
)
def test_bad_files_raise_config_error(tmp_path, text):
    with pytest.raises(ConfigError):
        RunConfig.from_file(_config_file(tmp_path, text))


def test_missing_file():
    with pytest.raises(ConfigError):
        RunConfig.from_file("/nonexistent/run.env")


def test_scheme_labels():
    assert CvScheme.parse("lpo:5:12.5").label == "lpo:5:12.5"
    assert CvScheme.parse(" kfold:10 ").label == "kfold:10"
    with pytest.raises(ConfigError):
        CvScheme.parse("lpo:x:1")


def test_mapping_values_are_coerced():
    cfg = RunConfig.from_mapping({"models": "mean", "day": "3", "mesh_max_nodes": "250"})
    assert cfg.models == ("mean",)
    assert cfg.day == "3"
    assert cfg.mesh_max_nodes == 250
    assert cfg.tol == 1e-6
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"mesh_max_nodes": "2"})


def test_thread_count(monkeypatch):
    monkeypatch.delenv("SPATIOTEMP_THREADS", raising=False)
    assert thread_count() == min(os.cpu_count() or 1, 8)
    monkeypatch.setenv("SPATIOTEMP_THREADS", "3")
    assert thread_count() == 3
    for bad in ("0", "many"):
        monkeypatch.setenv("SPATIOTEMP_THREADS", bad)
        with pytest.raises(ConfigError):
            thread_count()
