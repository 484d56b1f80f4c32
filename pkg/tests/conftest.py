"""Shared fixtures: one oscillator run reused by the slow end-to-end tests."""
import numpy as np
import pytest

from cfqp.datagen import Dataset, GenConfig, generate
from cfqp.model import CfqpConfig, CfqpModel, em_train, train_init

OSC_CFG = GenConfig("oscillator", 128, 128, 1000, sigma=0.05,
                    noise_mode="additive", k0=3, seed=0)
MODEL_CFG = CfqpConfig(k=3, delta=20, epochs0=500, epochs1=500, seed=0)


@pytest.fixture(scope="session")
def osc_data() -> Dataset:
    return generate(OSC_CFG)


@pytest.fixture(scope="session")
def osc_m0(osc_data):
    return train_init(osc_data, MODEL_CFG)


@pytest.fixture(scope="session")
def osc_model(osc_data, osc_m0) -> CfqpModel:
    return em_train(osc_data, osc_m0, MODEL_CFG)


@pytest.fixture(scope="session")
def osc_deep_ite(osc_data, osc_m0):
    """Deep-ITE network with the same total budget, sharing the init model."""
    return em_train(osc_data, osc_m0, MODEL_CFG.replace(k=1)).models[0]
