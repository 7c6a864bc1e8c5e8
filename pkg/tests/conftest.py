import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from clipdecomp.model import random_image, random_model

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {name}{' - ' + detail if detail else ''}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy(rng):
    """L=2, H=2, d=8, d'=4, N=4 toy model and one image."""
    model = random_model(rng, num_layers=2, num_heads=2, width=8, output_dim=4, patch_size=2, grid=(2, 2))
    return model, random_image(rng, model.config, "img0")


@pytest.fixture
def toy_corpus(rng):
    """A moderately sized model with a handful of decomposed images."""
    from clipdecomp.decomposition import decompose_image

    model = random_model(rng, num_layers=3, num_heads=4, width=16, output_dim=8, patch_size=2, grid=(3, 3))
    images = [random_image(rng, model.config, f"img{i}") for i in range(12)]
    return model, images, [decompose_image(model, im) for im in images]
