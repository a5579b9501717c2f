import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from hqclip.synth import generate_dataset, generate_eval_suite, generate_world  # noqa: E402
from hqclip.textkit import TokenizerSpec  # noqa: E402
from hqclip.types import DescriptionSet, Sample  # noqa: E402


@pytest.fixture(scope="session")
def small_world():
    return generate_world(3, n_concepts=4, n_attrs=3, D_in=16)


@pytest.fixture(scope="session")
def small_samples(small_world):
    return generate_dataset(small_world, 120, 0.75, seed=1)


@pytest.fixture(scope="session")
def small_tok(small_world):
    return TokenizerSpec.from_words(small_world.vocab)


@pytest.fixture(scope="session")
def small_suite(small_world):
    return generate_eval_suite(small_world, (40, 40, 40), seed=1)


@pytest.fixture
def refined_sample():
    ds = DescriptionSet(
        "a red car. it is parked on a road; the sky is grey.",
        "a blue car. it is parked on a road; the sky is grey.",
        ("car", "red", "road"),
        ("blue",),
    )
    return Sample("s-1", np.arange(4, dtype=float), "red car on road", ds)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"C{n:02d} {'PASS' if ok else 'FAIL'}  {detail}")
