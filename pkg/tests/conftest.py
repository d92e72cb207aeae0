import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=100)
settings.load_profile("repo")

CIFAR10_PRIOR = [0.0996, 0.1002, 0.0987, 0.1009, 0.0995, 0.0996, 0.1006, 0.0997, 0.1005, 0.1006]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def cifar_prior_file(tmp_path):
    path = tmp_path / "prior.txt"
    path.write_text("# class prior\n" + "\n".join(str(v) for v in CIFAR10_PRIOR) + "\n")
    return path


# one "PASS/FAIL criterion N: ..." line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
