import numpy as np
import pytest

from distilsrl.tensor import precision


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def micro_config(layers=1):
    """Smallest encoder that still exercises every block; for finite differences."""
    from distilsrl.model import ModelConfig
    return ModelConfig(conv_layers=((4, 4, 2),), model_dim=8, num_transformer_layers=layers, num_heads=2,
                       ffn_dim=12, pos_conv=(4, 2))


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, collected by test_acceptance.py."""
    import sys
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.RESULTS:
        terminalreporter.write_line(line)
