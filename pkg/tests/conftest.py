import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# criterion number -> (title, "PASS" | "FAIL", detail)
ACCEPTANCE_RESULTS: dict[int, tuple[str, str, str]] = {}


@pytest.fixture(scope="session")
def planar_pipeline(tmp_path_factory):
    """Memoized ``run_pipeline`` on the shipped planar scenario, keyed by injection fraction and seed."""
    from drvalidate.harness import run_pipeline
    from drvalidate.scenario import load_scenario

    cache = {}

    def run(fraction=0.0, seed=7, fresh=False):
        key = (fraction, seed)
        if fresh or key not in cache:
            sc = load_scenario("planar_inspection", injection={"kind": "fraction", "fraction": fraction})
            out = tmp_path_factory.mktemp(f"pipeline_{fraction}_{seed}")
            res = run_pipeline(sc, seed=seed, out=out)
            if fresh:
                return res, out
            cache[key] = (res, out)
        return cache[key]

    return run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, status, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title} ({detail})")
