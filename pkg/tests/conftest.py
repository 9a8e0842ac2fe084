import pytest

from cd2pfed import FederationConfig


def small_config(**over) -> FederationConfig:
    d = {"clients": 4, "rounds": 3, "batch_size": 16, "lr": 0.05, "model": {"hidden": [8, 6]},
         "data": {"num_classes": 4, "dims": 5, "per_class": 30, "heterogeneity": {"kind": "label_skew", "s": 2}}}
    d.update(over)
    return FederationConfig.from_dict(d)


@pytest.fixture
def cfg():
    return small_config()


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
