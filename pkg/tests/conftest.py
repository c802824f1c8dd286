import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vision():
    from finealign.encoders import VisionEncoderConfig
    return VisionEncoderConfig(image_size=16, patch_size=4, depth=2, width=16, heads=2, embed_dim=16)


@pytest.fixture
def tiny_text():
    from finealign.encoders import TextEncoderConfig
    return TextEncoderConfig(vocab_size=512, max_len=32, depth=1, width=16, heads=2, embed_dim=16)


@pytest.fixture
def tiny_data():
    from finealign.datamodel import SyntheticSceneSpec, synthesize_dataset
    return synthesize_dataset(SyntheticSceneSpec(image_size=16, seed=3), 8)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
