import json
from pathlib import Path

import pytest

from momentflow import harness

TINY = Path(__file__).with_name("tiny_config.json")


@pytest.fixture
def tiny_config(tmp_path):
    """A Burgers configuration that runs every pipeline stage in about a second."""
    d = json.loads(TINY.read_text())
    d["output_dir"] = str(tmp_path / "run")
    return harness.ExperimentConfig.from_dict(d)


def pytest_terminal_summary(terminalreporter, config):
    from test_acceptance import ACCEPTANCE_KEY
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
