"""Canonical desk-scale mixtures, one per way two Gaussians can barely overlap.

========== ===================================================================
preset     components
========== ===================================================================
mean-sep   identity covariances, means ``20 * i`` along the first axis
var-sep    common zero mean, covariances ``100^i * I``
cov-sep    common zero mean, diagonal covariances whose eigenvalues alternate
           ``r, 1/r`` with ``r = 1.35`` (component 0 is the identity; further
           components use ``r^i``), so no direction has a large variance
           ratio but the relative Frobenius distance is sizable
========== ===================================================================

Default dimensions are 2, 10 and 8 respectively.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import InvalidParameter
from .gaussians import GaussianParams, MixtureModel

__all__ = ["PRESETS", "DEFAULT_DIMS", "preset_mixture"]

PRESETS = ("mean-sep", "var-sep", "cov-sep")
DEFAULT_DIMS = {"mean-sep": 2, "var-sep": 10, "cov-sep": 8}

MEAN_GAP = 20.0
VARIANCE_RATIO = 100.0
PENCIL_RATIO = 1.35


def preset_mixture(name: str, k: int = 2, d: Optional[int] = None) -> MixtureModel:
    """Uniform ``k``-component mixture for a named preset.

    Parameters
    ----------
    name : {'mean-sep', 'var-sep', 'cov-sep'}
    k : int
        Number of components (at least 1).
    d : int, optional
        Dimension; defaults to :data:`DEFAULT_DIMS`.  ``cov-sep`` needs
        ``d >= 2``.

    Examples
    --------
    >>> m = preset_mixture("mean-sep")
    >>> m.components[1].mean.tolist()
    [20.0, 0.0]
    """
    if name not in PRESETS:
        raise InvalidParameter(f"unknown preset {name!r}; choose from {PRESETS}")
    if k < 1:
        raise InvalidParameter("k must be at least 1")
    d = DEFAULT_DIMS[name] if d is None else int(d)
    if d < 1:
        raise InvalidParameter("d must be positive")
    comps = []
    for i in range(k):
        if name == "mean-sep":
            mu = np.zeros(d)
            mu[0] = MEAN_GAP * i
            comps.append(GaussianParams(mu, np.eye(d)))
        elif name == "var-sep":
            comps.append(GaussianParams(np.zeros(d), VARIANCE_RATIO**i * np.eye(d)))
        else:
            if d < 2:
                raise InvalidParameter("cov-sep needs d >= 2")
            r = PENCIL_RATIO**i
            ev = np.array([r if j % 2 == 0 else 1.0 / r for j in range(d)])
            comps.append(GaussianParams(np.zeros(d), np.diag(ev)))
    return MixtureModel.uniform(comps)
