import pytest

from fedverify import data, nn

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash[_VERDICTS]
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for line in verdicts:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request, capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        request.config.stash[_VERDICTS].append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


@pytest.fixture
def small_model():
    """Table-1 layer stack on 16x16 inputs."""
    return nn.SiameseModel(input_size=16)


@pytest.fixture
def tiny_subjects():
    return data.synth_generate(12, 6, 16, 0.2, seed=3)
