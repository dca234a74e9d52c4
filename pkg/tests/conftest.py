from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from fatrec import kernels
from fatrec.data import chrono_split, filter_sparse, ingest, load_categories

ML100K = Path(__file__).resolve().parents[1] / "data" / "ml-100k"


def available_backends() -> list[str]:
    out = ["python"]
    try:
        kernels.backend_module("cython")
        out.append("cython")
    except ImportError:
        pass
    return out


@pytest.fixture(params=available_backends())
def backend(request):
    return kernels.backend_module(request.param)


def write_synthetic_log(path: Path, n_users: int = 40, n_items: int = 60, per_user=(12, 30),
                        seed: int = 0) -> Path:
    """TSV log with string ids, 1-5 ratings and per-user increasing timestamps.

    Users belong to one of three taste groups, so similarities spread out.
    """
    rng = np.random.default_rng(seed)
    groups = rng.integers(0, 3, size=n_users)
    pref = rng.normal(size=(3, n_items))
    lines = ["user\titem\trating\ttimestamp"]
    for u in range(n_users):
        n = int(rng.integers(per_user[0], per_user[1] + 1))
        w = np.exp(pref[groups[u]])
        items = rng.choice(n_items, size=n, replace=False, p=w / w.sum())
        t = 1_000_000 + u * 37 + np.cumsum(rng.integers(0, 3 * 86400, size=n))
        for it, ts in zip(items, t):
            r = int(np.clip(np.rint(3 + pref[groups[u], it] + rng.normal(scale=0.5)), 1, 5))
            lines.append(f"u{u}\ti{it}\t{r}\t{int(ts)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_synthetic_categories(path: Path, n_items: int = 60, n_cats: int = 5) -> Path:
    path.write_text("".join(f"i{i}\tc{i % n_cats}\n" for i in range(n_items)), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def synth_paths(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    return write_synthetic_log(d / "log.tsv"), write_synthetic_categories(d / "cats.tsv")


@pytest.fixture(scope="session")
def synth_split(synth_paths):
    log_path, cat_path = synth_paths
    lg = filter_sparse(ingest(log_path), 5, 2)
    lg.catalog = load_categories(cat_path, lg.catalog)
    return chrono_split(lg, (5, 2), (0, 0, 0))


def ml100k_available() -> bool:
    return (ML100K / "ml-100k.inter").exists()


requires_ml100k = pytest.mark.skipif(
    not ml100k_available(), reason="ML-100K not fetched (python scripts/fetch_ml100k.py)")


def ml1m_path() -> Path | None:
    p = os.environ.get("FATREC_ML1M")
    return Path(p) if p else None


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":").split("-")[0])):
            terminalreporter.write_line(line)
