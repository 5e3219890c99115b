"""Unsupervised identification of heterogeneous hyperelastic plates.

Full-field displacements and boundary reaction forces of a thin plate are
used to split the plate into material regions and to identify a sparse,
nonnegative strain-energy model in each region by spike-and-slab
Bayesian regression.
"""

from .errors import *  # noqa: F401,F403

__version__ = "0.1.0"
