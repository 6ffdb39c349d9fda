import logging

import pytest

from samcl.config import ExperimentConfig, with_settings

logging.getLogger("samcl").setLevel(logging.WARNING)

TINY = {
    "benchmark.samples_per_class": 10,
    "benchmark.image_size": 16,
    "pretrain.epochs": 1,
    "pretrain.samples_per_class": 10,
    "pretrain.classes": 4,
}


def tiny(**settings) -> ExperimentConfig:
    return with_settings(ExperimentConfig(), **{**TINY, **settings})


@pytest.fixture
def tiny_config():
    return tiny
