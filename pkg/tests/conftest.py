import numpy as np
import pytest

from fa_ood.backend import make_toy_backend
from fa_ood.data import resolve_benchmark, toy_backend_for
from fa_ood.prompts import build_dual_prompts
from fa_ood.training import encode_benchmark

SMALL_CLASSES = ["cat", "sea lion", "dog"]


@pytest.fixture
def small_backend():
    return make_toy_backend(SMALL_CLASSES, seed=3, embed_dim=8, token_dim=6, num_locals=2, max_context_len=8)


@pytest.fixture
def small_bank(small_backend):
    return build_dual_prompts(SMALL_CLASSES, small_backend.spec)


@pytest.fixture(scope="session")
def data_root(tmp_path_factory):
    return tmp_path_factory.mktemp("fa_ood_data")


@pytest.fixture(scope="session")
def toy_bench(data_root):
    return resolve_benchmark("toy", root=data_root)


@pytest.fixture(scope="session")
def toy_backend(toy_bench):
    return toy_backend_for(toy_bench.synthetic)


@pytest.fixture(scope="session")
def toy_data(toy_bench, toy_backend):
    return encode_benchmark(toy_bench, lambda m: toy_backend)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
