import numpy as np
import pytest

from mapsearch.models import AlgorithmKind, Problem
from mapsearch.services import dataset as ds
from mapsearch.services import surrogate
from mapsearch.services.costmodel import accelerator_presets


@pytest.fixture(scope="session")
def presets():
    return accelerator_presets()


@pytest.fixture(scope="session")
def tiny(presets):
    return presets["tiny"]


@pytest.fixture(scope="session")
def desk(presets):
    return presets["desk"]


@pytest.fixture(scope="session")
def single_pe(presets):
    return presets["single-pe"]


@pytest.fixture
def conv1d_small():
    return Problem(AlgorithmKind.CONV1D, (8, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def conv1d_dataset(tmp_path_factory, desk):
    path = str(tmp_path_factory.mktemp("data") / "conv1d.csv")
    problem_range = ds.ProblemRange.default(AlgorithmKind.CONV1D, W=(8, 24), R=(2, 4))
    ds.generate(desk, AlgorithmKind.CONV1D, problem_range, 300, seed=7, path=path, test_fraction=0.2)
    return ds.load(path)


@pytest.fixture(scope="session")
def conv1d_model(conv1d_dataset, desk):
    stats = ds.fit_norm(conv1d_dataset, desk)
    model = surrogate.build_model(AlgorithmKind.CONV1D, (16, 16), "relu", seed=3, norm=stats)
    cfg = surrogate.TrainConfig(epochs=5, batch_size=32, lr=1e-2)
    return surrogate.train(model, conv1d_dataset, cfg).model
