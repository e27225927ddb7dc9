import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def default_weights():
    from bayesreadout.pinet import default_weights_path, load_weights

    path = default_weights_path()
    if not path.exists():
        pytest.skip("bundled network weights not built yet")
    return load_weights(path)
