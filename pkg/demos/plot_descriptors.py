"""
Sampling open-space descriptors
===============================

Descriptors are fake features placed on the sphere of radius ``s``.  They
are labelled as the unknown class so the head learns to leave empty parts
of the feature sphere to the unknown channel.
"""

import numpy as np

from omcl.model import sample_descriptors

rng = np.random.default_rng(0)

# cube-project: uniform in [-s, s]^d, then pushed onto the sphere
batch = sample_descriptors(5, 3, s=16.0, rng=rng)
print(batch.z.round(3))
print("norms:", np.linalg.norm(batch.z, axis=1))

# the projection is not uniform on the sphere: cube corners pile up along the
# diagonals, where no single coordinate dominates, so the largest coordinate
# is smaller on average than for Gaussian-normalized draws
cube = sample_descriptors(20000, 3, 1.0, rng, mode="cube-project").z
sphere = sample_descriptors(20000, 3, 1.0, rng, mode="sphere-uniform").z
print("mean |max coord|  cube-project  :", np.abs(cube).max(axis=1).mean().round(4))
print("mean |max coord|  sphere-uniform:", np.abs(sphere).max(axis=1).mean().round(4))

# on a line the sphere is just two points
print(np.unique(sample_descriptors(10, 1, 2.5, rng).z))
