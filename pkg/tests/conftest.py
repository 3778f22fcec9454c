import pytest

from donpipe import fixtures as fx


@pytest.fixture(scope="session")
def labeled():
    """(scene, cloud, train, heldout, occlusion) for the two-sphere fixture."""
    return fx.labeled_fixture()


@pytest.fixture(scope="session")
def trained(labeled):
    return fx.train_fixture_encoder(labeled[2])


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
