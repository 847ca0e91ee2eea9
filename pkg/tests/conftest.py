import dataclasses
import sys
import time
from pathlib import Path

import pytest

from forgetlab.experiment import load_config, run_sweep

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(Path(__file__).resolve().parent))

CONFIGS = ROOT / "configs"

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(n: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(passed), detail)
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")

    return record


def _sweep(tmp_path_factory, name):
    cfg = load_config(CONFIGS / f"{name}.yaml")
    cfg = dataclasses.replace(cfg, output_dir=str(tmp_path_factory.mktemp(name)), workers=1)
    t0 = time.process_time()
    results = run_sweep(cfg, resume=False)
    return cfg, results, time.process_time() - t0


@pytest.fixture(scope="session")
def methods_sweep(tmp_path_factory):
    """The five-method sweep on the default benchmark: (config, results, CPU seconds)."""
    return _sweep(tmp_path_factory, "methods")


@pytest.fixture(scope="session")
def ewc_l2(tmp_path_factory):
    cfg, results, _ = _sweep(tmp_path_factory, "ewc_l2")
    return cfg, results


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
