import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine(freq, rate, duration, amp=0.5):
    t = np.arange(int(round(duration * rate))) / rate
    return amp * np.sin(2 * np.pi * freq * t)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES):
            terminalreporter.write_line(line)
