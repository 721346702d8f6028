import os

import pytest
from hypothesis import HealthCheck, settings

from cepshed.model import running_example

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def topo():
    return running_example()
