"""Shared configuration for test files."""

import os


def get_mc_samples(default: int = 20_000) -> int:
    """Monte Carlo sample count for statistical tests.

    Returns the value of environment variable TEST_MC_SAMPLES, or the default.
    Raise it (e.g. to 200000) for the full-strength consistency check.
    """
    env_value = os.environ.get("TEST_MC_SAMPLES")
    if env_value:
        return int(env_value)
    return default


def get_opt_budget(default: int = 400) -> int:
    """Cost evaluations per restart for optimiser tests (TEST_OPT_BUDGET)."""
    env_value = os.environ.get("TEST_OPT_BUDGET")
    if env_value:
        return int(env_value)
    return default
