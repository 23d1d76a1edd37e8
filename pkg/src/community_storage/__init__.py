"""Initialise the Community Storage package."""

from importlib.metadata import PackageNotFoundError
from importlib.metadata import version


def installed_version() -> str:
    """Return the installed distribution version, or ``"unknown"`` when running from a source checkout."""
    try:
        return version("community-storage-sharing")
    except PackageNotFoundError:
        return "unknown"
