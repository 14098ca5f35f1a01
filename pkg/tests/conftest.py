import os
from pathlib import Path

import pytest

from capsdec import capsnet as C
from capsdec.data_io import export_mnist_subset

ROOT = Path(__file__).resolve().parents[1]

# Desk recipe for the shared CapsNet: the 4000-image split of the bundled
# 5k sample, trained long enough for faithful theoretical reconstructions.
DESK_EPOCHS = int(os.environ.get("CAPSDEC_DESK_EPOCHS", "8"))


@pytest.fixture(scope="session")
def mnist_dir() -> Path:
    d = Path(os.environ.get("CAPSDEC_DESK_MNIST", ROOT / "data" / "mnist5k"))
    if not (d / "t10k-labels-idx1-ubyte").exists():
        export_mnist_subset(d)
    return d


@pytest.fixture(scope="session")
def capsnet_path(mnist_dir) -> Path:
    path = Path(os.environ.get("CAPSDEC_CAPSNET", ROOT / "artifacts" / "capsnet_desk.ckpt"))
    if not path.exists():
        from capsdec.cli import main

        path.parent.mkdir(parents=True, exist_ok=True)
        rc = main(["train-capsnet", "--mnist-dir", str(mnist_dir), "--epochs", str(DESK_EPOCHS), "--out", str(path)])
        assert rc == 0
    return path


@pytest.fixture(scope="session")
def trained_capsnet(capsnet_path) -> C.CapsNetModel:
    return C.load_model(capsnet_path)


# -- acceptance reporting -----------------------------------------------------

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{self.detail} {exc_type.__name__}: {exc}".strip()
        _CRITERIA[self.number] = (self.title, ok, " ".join(detail.split()))
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
