"""Principal-stratum effects in cluster-randomized trials with noncompliance."""

__version__ = "0.1.0"

from . import simulation  # noqa: F401  registers the "misspecified" feature transform
