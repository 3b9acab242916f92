"""Shared fixtures.

Full-size training runs are expensive (about a minute per model on one core),
so the acceptance pipeline and its model cache are built once per session and
shared by every test that needs a trained model.
"""

import os

import pytest
from hypothesis import settings

from laserprog.datagen import DatasetSpec, build_dataset
from laserprog.experiments import ModelCache, pipeline_config, run_pipeline

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ACCEPTANCE_SEED = 42


@pytest.fixture(scope="session")
def model_cache():
    # LASERPROG_CACHE_DIR lets repeated local runs reuse trained models
    return ModelCache(os.environ.get("LASERPROG_CACHE_DIR"))


@pytest.fixture(scope="session")
def default_spec():
    return DatasetSpec(seed=ACCEPTANCE_SEED)


@pytest.fixture(scope="session")
def default_dataset(default_spec):
    return build_dataset(default_spec)


@pytest.fixture(scope="session")
def acceptance_run(default_dataset, model_cache):
    return run_pipeline(default_dataset, pipeline_config(ACCEPTANCE_SEED), model_cache)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
