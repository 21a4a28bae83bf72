import numpy as np
import pytest

from tame.backbone import PatchConfig
from tame.frontend import load_dataset, preset
from tame.synth import make_dataset

# small enough for sub-second steps in unit tests
TINY_PATCH = PatchConfig(D=12, L=1, n_state=4)
TINY_HEADS = 2


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """A rendered 16/8 dataset, its directory and the J16 spectrograms."""
    out = tmp_path_factory.mktemp("tiny")
    manifest = make_dataset(16, 8, seed=3, out_dir=out)
    fe = preset("J16")
    return out, load_dataset(manifest, fe, split="train"), load_dataset(manifest, fe, split="test")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record():
    """Record and print one pass/fail line for an acceptance criterion, then assert it."""

    def _record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
