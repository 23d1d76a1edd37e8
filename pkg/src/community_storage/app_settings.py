"""Namespaced settings for the community_storage package.

Every setting has a documented default. Overrides are read once, at import,
from the TOML file named by the ``COMMUNITY_STORAGE_SETTINGS`` environment
variable:

.. code-block:: toml

    [community_storage]
    MAX_BRANCH_NODES = 50000
    SHAPLEY_MAX_PLAYERS = 16

"""

import logging
import os
import tomllib


logger = logging.getLogger("community_storage")

SETTINGS_ENV_VAR = "COMMUNITY_STORAGE_SETTINGS"
"""str: Environment variable naming the TOML file with setting overrides."""


def load_overrides(path=None) -> dict:
    """Read the ``[community_storage]`` table of a settings file.

    Args:
        path: Settings file. Defaults to the file named by ``COMMUNITY_STORAGE_SETTINGS``.

    Returns:
        The overrides, or an empty dict when no file is configured or it cannot be read.
    """
    path = path or os.environ.get(SETTINGS_ENV_VAR)
    if not path:
        return {}
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except (OSError, tomllib.TOMLDecodeError) as err:
        logger.error("Settings could not be loaded: %s", {"path": str(path), "error": str(err)})
        return {}
    overrides = data.get("community_storage", {})
    logger.debug("Loaded settings overrides: %s", {"path": str(path), "keys": sorted(overrides)})
    return overrides


_COMMUNITY_STORAGE = load_overrides()

FEASIBILITY_TOLERANCE = float(_COMMUNITY_STORAGE.get("FEASIBILITY_TOLERANCE", 1e-7))
"""float: Largest row or bound violation accepted in an optimal LP solution, measured on equilibrated rows."""

OPTIMALITY_TOLERANCE = float(_COMMUNITY_STORAGE.get("OPTIMALITY_TOLERANCE", 1e-7))
"""float: Reduced-cost threshold for optimality, relative to the largest objective coefficient."""

INTEGRALITY_TOLERANCE = float(_COMMUNITY_STORAGE.get("INTEGRALITY_TOLERANCE", 1e-6))
"""float: Distance from 0 or 1 below which a binary variable counts as integral."""

VIOLATION_TOLERANCE = float(_COMMUNITY_STORAGE.get("VIOLATION_TOLERANCE", 1e-6))
"""float: Smallest excess over the master level that counts as a violated coalition."""

BINDING_TOLERANCE = float(_COMMUNITY_STORAGE.get("BINDING_TOLERANCE", 1e-6))
"""float: Initial tolerance for recognising coalitions whose excess equals the master level."""

BINDING_RETRIES = int(_COMMUNITY_STORAGE.get("BINDING_RETRIES", 3))
"""int: Times the binding tolerance is tightened tenfold after an infeasible master before giving up."""

UNIQUENESS_TOLERANCE = float(_COMMUNITY_STORAGE.get("UNIQUENESS_TOLERANCE", 1e-7))
"""float: Largest range of an allocation component for the master solution to count as unique."""

MILP_AGREEMENT_TOLERANCE = float(_COMMUNITY_STORAGE.get("MILP_AGREEMENT_TOLERANCE", 1e-5))
"""float: Allowed gap between the violation found by the MILP and the same coalition re-evaluated by LP."""

COMPLEMENTARITY_TOLERANCE = float(_COMMUNITY_STORAGE.get("COMPLEMENTARITY_TOLERANCE", 1e-6))
"""float: Product of paired flows above which a schedule counts as charging and discharging at once."""

MAX_SIMPLEX_ITERATIONS = int(_COMMUNITY_STORAGE.get("MAX_SIMPLEX_ITERATIONS", 200_000))
"""int: Simplex iteration limit per LP solve (both phases)."""

REFACTOR_INTERVAL = int(_COMMUNITY_STORAGE.get("REFACTOR_INTERVAL", 32))
"""int: Number of product-form basis updates between fresh LU factorizations."""

DEGENERACY_STALL_THRESHOLD = int(_COMMUNITY_STORAGE.get("DEGENERACY_STALL_THRESHOLD", 50))
"""int: Consecutive degenerate pivots after which pricing switches to Bland's rule."""

MAX_BRANCH_NODES = int(_COMMUNITY_STORAGE.get("MAX_BRANCH_NODES", 20_000))
"""int: Branch-and-bound node limit per MILP solve."""

SHAPLEY_MAX_PLAYERS = int(_COMMUNITY_STORAGE.get("SHAPLEY_MAX_PLAYERS", 20))
"""int: Largest community for which the Shapley value runs without ``force``."""

DSAT_ENUMERATION_MAX_PLAYERS = int(_COMMUNITY_STORAGE.get("DSAT_ENUMERATION_MAX_PLAYERS", 12))
"""int: Largest community for which dissatisfaction may be computed by evaluating every coalition."""

CONFIG_ENV_VAR = _COMMUNITY_STORAGE.get("CONFIG_ENV_VAR", "COMMUNITY_STORAGE_CONFIG")
"""str: Environment variable the CLI consults for the community config when ``--config`` is omitted."""
