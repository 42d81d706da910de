import numpy as np
import pytest
import torch

from tgwm import backbone, imageio


@pytest.fixture(scope="session")
def corpus16():
    return imageio.generate_synthetic_corpus(16, 0)


@pytest.fixture(scope="session")
def images8(corpus16):
    return [img for _, img in imageio.unique_images(corpus16)[:8]]


@pytest.fixture(scope="session")
def stub():
    return backbone.stub_backbone(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
