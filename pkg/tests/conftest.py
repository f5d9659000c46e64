import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from prunekit.desknet import make_desk_dataset, pretrained_desk_net


@pytest.fixture(scope="session")
def desk_graph():
    """The shipped pretrained desk net."""
    return pretrained_desk_net()


@pytest.fixture(scope="session")
def desk_data():
    """(train, test) splits matching the pretrained desk net."""
    return make_desk_dataset(seed=0)
