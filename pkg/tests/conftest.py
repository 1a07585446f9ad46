import pytest

from aif.config import AIFConfig
from aif.features import build_store
from aif.model import init_model

SMALL = dict(
    num_users=12,
    num_items=512,
    num_categories=16,
    min_user_categories=4,
    max_user_categories=8,
    long_seq_len=512,
    candidates=128,
)


@pytest.fixture(scope="session")
def small_cfg():
    return AIFConfig(**SMALL)


@pytest.fixture
def small_store(small_cfg):
    return build_store(small_cfg)


@pytest.fixture(scope="session")
def small_model(small_cfg):
    return init_model(small_cfg)
