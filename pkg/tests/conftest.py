import numpy as np
import pytest
import torch

from planemark import ModelConfig, build_model, scheme_descriptor, synth_generate
from planemark.data import DatasetRegistry
from planemark.training import register_datasets

# toy configuration used by the gradient and equivariance checks:
# 32x32 image, 16x16 patches (L=4), C=16, 2 heads, encoder depth 1,
# decoder depth 2
TOY = ModelConfig(image_size=(32, 32), patch_size=(16, 16), channels=16,
                  num_heads=2, encoder_depth=1, decoder_depth=2)

# slightly wider configuration for the directional experiments
DESK = ModelConfig(image_size=(32, 32), patch_size=(8, 8), channels=32,
                   num_heads=4, encoder_depth=2, decoder_depth=2)


@pytest.fixture(scope="session")
def toy_config():
    return TOY


@pytest.fixture(scope="session")
def desk_config():
    return DESK


@pytest.fixture(scope="session")
def toy_model_with_dataset():
    """Toy model registered on a tiny scheme-A dataset, with parameters
    nudged off the zero-init point so gradients are generic."""
    model = build_model(TOY, seed=0)
    samples, _ = synth_generate("A", 2, seed=0, image_size=32)
    registry = DatasetRegistry()
    registry.add(scheme_descriptor("A"), samples)
    register_datasets(model, registry)
    gen = torch.Generator().manual_seed(123)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.05)
    return model, samples, registry


def make_registry(scheme: str, samples) -> DatasetRegistry:
    registry = DatasetRegistry()
    registry.add(scheme_descriptor(scheme), samples)
    return registry
