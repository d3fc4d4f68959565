import importlib.util
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

HAVE_MNIST_SUBSET = importlib.util.find_spec("mlxtend") is not None


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    if not HAVE_MNIST_SUBSET:
        pytest.skip("mlxtend (bundled MNIST sample) not installed")
    from feddrl.data import export_mnist_subset

    return export_mnist_subset(tmp_path_factory.mktemp("mnist"))


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
