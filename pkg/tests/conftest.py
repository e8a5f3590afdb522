import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from pvlff.data import generate_scene, load_scene, part_whole_scene

# BLAS reductions stay single-threaded so float results are reproducible
_LIMITS = threadpool_limits(limits=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_scene_dir(tmp_path_factory):
    """A small part-whole scene (4 views at 24x24) shared by fast tests."""
    spec = part_whole_scene()
    spec.views = 4
    spec.height = spec.width = 24
    out = tmp_path_factory.mktemp("tiny") / "scene"
    generate_scene(spec, out, seed=5)
    return out


@pytest.fixture(scope="session")
def tiny_scene(tiny_scene_dir):
    return load_scene(tiny_scene_dir)
