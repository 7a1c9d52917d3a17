"""Session-wide fixtures.

Everything here is deterministic; session scope is purely a speed choice.
Fixtures that hand out mutable objects return fresh copies per test.
"""

from __future__ import annotations

import pytest

from deskrl.corpus import Prompt, generate_task_suite
from deskrl.policy import FeatureSpec, init_policy
from deskrl.vocab import build_vocabulary

TINY_COUNTS = {"arithmetic": 12, "open": 12, "sort": 4, "copy": 4}


@pytest.fixture(scope="session")
def suite():
    return generate_task_suite(3, dict(TINY_COUNTS))


@pytest.fixture(scope="session")
def spec(suite):
    return FeatureSpec(suite.vocab)


@pytest.fixture(scope="session")
def _base_cached(spec):
    return init_policy(spec, 0)


@pytest.fixture
def base(_base_cached):
    return _base_cached.copy()


@pytest.fixture(scope="session")
def arith_prompt(suite):
    return suite.in_domain_train.prompts[0]


@pytest.fixture(scope="session")
def open_prompt(suite):
    return suite.open_train.prompts[0]


# A four-token world (eos, marker, two digits) with a three-step cap keeps
# the full sequence space enumerable.
@pytest.fixture(scope="session")
def spec4():
    return FeatureSpec(build_vocabulary(4), max_response_len=3)


@pytest.fixture(scope="session")
def prompt4(spec4):
    p = Prompt(
        id="tiny-0", domain="arithmetic", kind="verifiable",
        tokens=tuple(spec4.vocab.encode(["1", "0"])),
        gold=tuple(spec4.vocab.encode(["1"])),
    )
    p.validate(spec4.vocab)
    return p
