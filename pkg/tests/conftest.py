"""
Root conftest.py.

Registers the hypothesis profiles and the fixtures shared by the unit and
CLI suites. Select a profile with HYPOTHESIS_PROFILE=ci.
"""

from __future__ import annotations

import logging
import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("dev", max_examples=25, deadline=None)
settings.register_profile(
    "ci",
    max_examples=100,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "dev"))


@pytest.fixture(autouse=True)
def _quiet_library_logs(caplog):
    """Keep library INFO lines out of test output unless a test asks for them."""
    caplog.set_level(logging.WARNING, logger="scene_fusion")
    yield
