"""Shared fixtures: a disk cache for trained parameters and the acceptance summary."""
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import mfcglobal

_PKG_DIR = Path(mfcglobal.__file__).parent
_CACHE_DIR = Path(__file__).resolve().parents[1] / ".acceptance_cache"
_RESULTS = []


def _source_digest():
    h = hashlib.sha256()
    for path in sorted(_PKG_DIR.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


class TrainedCache:
    """Parameters keyed by a config dict and the package sources.

    A stale entry cannot be picked up: editing any module or any setting
    changes the key.  Delete the directory (or set ``refresh``) to retrain.
    """

    def __init__(self, root: Path, refresh: bool = False):
        self.root = root
        self.refresh = refresh
        self.digest = _source_digest()

    def _path(self, name, config):
        blob = json.dumps(config, sort_keys=True, default=repr) + self.digest
        return self.root / f"{name}-{hashlib.sha256(blob.encode()).hexdigest()[:20]}.npz"

    def get(self, name, config, build):
        """``build()`` returns a dict of arrays; the wall time is stored alongside."""
        path = self._path(name, config)
        if path.exists() and not self.refresh:
            with np.load(path) as data:
                return {k: data[k] for k in data.files}
        t0 = time.perf_counter()
        out = build()
        out = {k: np.asarray(v) for k, v in out.items()}
        out["wall_time"] = np.array(time.perf_counter() - t0)
        self.root.mkdir(parents=True, exist_ok=True)
        np.savez(path, **out)
        return out


def pytest_addoption(parser):
    parser.addoption("--refresh-trained", action="store_true",
                     help="retrain acceptance models instead of loading cached parameters")


@pytest.fixture(scope="session")
def trained_cache(request):
    return TrainedCache(_CACHE_DIR, request.config.getoption("--refresh-trained"))


@pytest.fixture(scope="session")
def acceptance_log():
    def record(number, ok, detail):
        _RESULTS.append((number, bool(ok), detail))
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_RESULTS):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
