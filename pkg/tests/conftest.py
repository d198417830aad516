import json

import pytest

from fpgap.modelio import load_dataset, load_model, package_data


@pytest.fixture(scope="session")
def demo_net():
    return load_model(package_data("demo_model.fpgap"))


@pytest.fixture(scope="session")
def demo_dataset():
    return load_dataset(package_data("demo_dataset.fpgap"))


@pytest.fixture(scope="session")
def demo_seeds():
    with open(package_data("demo_seeds.json")) as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def demo_config():
    with open(package_data("demo_config.json")) as fh:
        return json.load(fh)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
