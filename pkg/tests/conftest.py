import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from icplab.networks import ArchSpec, build


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(2)


@pytest.fixture
def tiny_supervised_arch():
    return ArchSpec(
        input_shape=(1, 8, 8),
        d_z=4,
        d_y=4,
        mode="supervised",
        num_classes=2,
        trunk_widths=(4, 4),
    )


@pytest.fixture
def tiny_selfsup_arch():
    return ArchSpec(
        input_shape=(1, 8, 8),
        d_z=4,
        d_y=4,
        mode="self_supervised",
        trunk_widths=(4, 4),
    )


@pytest.fixture
def tiny_bundle(tiny_supervised_arch):
    return build(tiny_supervised_arch, seed=0)
