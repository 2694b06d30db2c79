import numpy as np
import pytest

from echo_esc.synthetic import write_esc_dataset, write_us8k_dataset


@pytest.fixture(scope="session")
def esc_csv(tmp_path_factory):
    """ESC-50 layout holding the ten ESC-10 classes plus pig and cow, 2 clips/class/fold."""
    return write_esc_dataset(tmp_path_factory.mktemp("esc"))


@pytest.fixture(scope="session")
def us8k_csv(tmp_path_factory):
    return write_us8k_dataset(tmp_path_factory.mktemp("us8k"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(LINES):
            terminalreporter.write_line(LINES[k])
