import shutil
import sys
import time
from pathlib import Path

import pytest
import torch

# test helpers live next to the tests
sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from tasgen.pipeline import PipelineRun, run_pipeline, standard_pipeline_config  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def artifact_bytes(root: Path) -> dict:
    """Bytes of every CSV and JSON file under a run directory."""
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.suffix in (".csv", ".json")}


class FixtureRun:
    """The standard fixture pushed through every stage once, shared by the slow tests."""

    def __init__(self, root: Path):
        self.root = root
        self.out = root / "run"
        self.cfg = standard_pipeline_config(str(self.out))
        t0 = time.perf_counter()
        self.report = run_pipeline(self.cfg)
        self.seconds = time.perf_counter() - t0
        self.snapshot = artifact_bytes(self.out)
        self.run = PipelineRun(self.cfg)

    def rerun(self) -> tuple[object, dict]:
        """Run again into the same directory; the first run's files move aside first."""
        shutil.move(str(self.out), str(self.root / "first"))
        try:
            report = run_pipeline(self.cfg)
            return report, artifact_bytes(self.out)
        finally:
            shutil.rmtree(self.out, ignore_errors=True)
            shutil.move(str(self.root / "first"), str(self.out))


@pytest.fixture(scope="session")
def fixture_run(tmp_path_factory):
    return FixtureRun(tmp_path_factory.mktemp("fixture"))
