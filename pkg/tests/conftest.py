from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from fozo.losses import estimate_source_stats
from fozo.model import FrozenModel, ModelSpec, load_checkpoint
from fozo.streams import TaskSpec, generate_source

settings.register_profile("fozo", deadline=None, max_examples=50)
settings.load_profile("fozo")

DATA = Path(__file__).parent / "data"
CHECKPOINT = DATA / "checkpoint.json"
# sha256 content hash of the committed pretrained checkpoint (seed 0, default specs)
CHECKPOINT_HASH = "8ded5b7e43541f93cc3ef84c65bc2aab7e4a4af5df00a92ed0225839a68b6919"


@pytest.fixture(scope="session")
def task():
    return TaskSpec()


@pytest.fixture(scope="session")
def model():
    return load_checkpoint(CHECKPOINT)


@pytest.fixture(scope="session")
def source(model, task):
    x, _ = generate_source(task, 2048, 12345)
    return estimate_source_stats(model, [x[i:i + 256] for i in range(0, len(x), 256)])


@pytest.fixture(scope="session")
def small_spec():
    return ModelSpec(n_layers=2, embed_dim=8, n_patches=4, n_classes=3, n_heads=2, input_dim=3, mlp_dim=8)


@pytest.fixture(scope="session")
def small_model(small_spec):
    return FrozenModel.random(small_spec, 5)


@pytest.fixture
def small_batch(small_spec):
    rng = np.random.default_rng(0)
    return rng.standard_normal((5, small_spec.n_patches, small_spec.input_dim))


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
