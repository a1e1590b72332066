import numpy as np
import pytest

from depmil.bagsynth import BagRecipe
from depmil.heads import MilHeadSpec, ModelSpec
from depmil.nn import BackboneSpec
from depmil.train import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_spec(variant="attention", num_classes=4, in_dim=16, stage_dims=(8,), depth=1, **head):
    return ModelSpec(
        BackboneSpec("mlp", in_dim=in_dim, stage_dims=stage_dims),
        MilHeadSpec(variant, attn_dim=8, depth=depth, num_heads=2, num_classes=num_classes, **head),
    )


@pytest.fixture
def small_recipe():
    return BagRecipe(label_rule="max_rule", count=40, seed=5)


@pytest.fixture
def tiny_config(small_recipe):
    return TrainConfig(model=tiny_spec(), data=small_recipe, epochs=2, folds=2, ensemble=2, seed=3)
