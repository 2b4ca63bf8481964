import pytest
import torch

from promptseg.data import DatasetSpec, load_dataset
from promptseg.generator import GeneratorConfig, build_prompt_generator, tiny_test_config
from promptseg.segmenter import FrozenStubBackend


@pytest.fixture()
def tiny_generator():
    return build_prompt_generator(tiny_test_config())


@pytest.fixture()
def stub_backend():
    return FrozenStubBackend()


@pytest.fixture()
def blob_batch():
    """Four deterministic 64x64 blob samples as stacked tensors."""
    ds = load_dataset(DatasetSpec(name="synthetic-blobs", synthetic_count=4, resize=(64, 64), seed=7))
    images = torch.stack([ds[i]["image"] for i in range(len(ds))])
    masks = torch.stack([ds[i]["mask"] for i in range(len(ds))])
    return images, masks


@pytest.fixture(scope="session")
def full_generator():
    """The full-size generator; built once per session (it is 41.8M params)."""
    return build_prompt_generator(GeneratorConfig())
