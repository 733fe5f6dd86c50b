"""Output writers: atomic files, CSV/JSON tables and the per-run manifest."""

from __future__ import annotations

from contextlib import contextmanager
from importlib import metadata
import json
import logging
import os
import platform
import tempfile
import time
from typing import Any, Dict, Iterator, List, Optional

import pandas as pd


logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
VERSIONED_PACKAGES = ("numpy", "scipy", "pandas", "shapely", "joblib", "python-dotenv")


@contextmanager
def atomic_open(path: str, mode: str = "w") -> Iterator[Any]:
    """Write to a temporary file next to ``path`` and rename it into place on success."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.splitext(path)[1])
    binary = "b" in mode
    try:
        with os.fdopen(fd, mode, **({} if binary else {"encoding": "utf-8", "newline": ""})) as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_text(path: str, text: str) -> str:
    with atomic_open(path) as f:
        f.write(text)
    return path


def write_json(path: str, payload: Any) -> str:
    return write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_frame(path: str, frame: pd.DataFrame, float_format: Optional[str] = None) -> str:
    with atomic_open(path) as f:
        frame.to_csv(f, index=False, float_format=float_format, lineterminator="\n")
    return path


def trace_frame(trace, theta_names) -> pd.DataFrame:
    """Optimizer trace rows (round, θ…, loglik)."""
    rows = [{"round": r, **dict(zip(theta_names, theta)), "loglik": ll} for r, theta, ll in trace]
    return pd.DataFrame.from_records(rows, columns=["round", *theta_names, "loglik"])


def _jsonable(value: Any) -> Any:
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, (set, frozenset, tuple)):
        return list(value)
    return str(value)


# -----------------------
# Manifest
# -----------------------

def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "missing"
    return versions


class RunManifest:
    """Config echo, versions, seed, wall time and outcome of one command run."""

    def __init__(self, command: str, output_dir: str, config: Dict[str, Any], seed: Optional[int] = None):
        self.command = command
        self.output_dir = output_dir
        self.config = config
        self.seed = seed
        self.outputs: List[str] = []
        self._started = time.perf_counter()

    def add(self, path: str) -> str:
        self.outputs.append(os.path.relpath(path, self.output_dir))
        return path

    def write(self, status: str = "ok", error: Optional[Dict[str, str]] = None) -> str:
        payload = {
            "command": self.command,
            "status": status,
            "error": error,
            "seed": self.seed,
            "config": self.config,
            "versions": package_versions(),
            "wall_time_s": round(time.perf_counter() - self._started, 3),
            "outputs": sorted(self.outputs),
        }
        path = os.path.join(self.output_dir, MANIFEST_NAME)
        write_json(path, payload)
        logger.info("Manifest written to %s (%s)", path, status)
        return path
