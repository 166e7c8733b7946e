import numpy as np
import pytest
import torch

from himfr.imaging import MaskGeometry, synthesize_mask
from himfr.synthetic import make_faces

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def faces64():
    """5 identities x 10 renders at 64x64."""
    return make_faces(5, 10, 64, seed=0)


@pytest.fixture(scope="session")
def masked_faces64(faces64):
    images, _ = faces64
    return [synthesize_mask(img, MaskGeometry(), seed=i) for i, img in enumerate(images)]
