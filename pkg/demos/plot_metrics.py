"""
Fréchet distance and the proxy FID
==================================

The Fréchet distance between Gaussians has closed forms that make handy
sanity checks. The proxy FID applies it to pooled features of two image sets.
"""
# %%
import os
import tempfile

import numpy as np

from segin.data import load_dataset, synth_shapes_dataset
from segin.evaluation import fid_score, frechet_distance

eye = np.eye(2)
print("shifted means:", frechet_distance([0, 0], eye, [3, 4], eye))
print("scaled covariance:", frechet_distance([1, 1], 4 * eye, [1, 1], eye))

# %%
# Proxy FID between real targets and their outline inputs is large; between
# two halves of the target set it is small.
root = os.environ.get("SEGIN_DEMO_OUT", tempfile.mkdtemp())
pairs = load_dataset(synth_shapes_dataset(40, 32, seed=3, root=os.path.join(root, "fid")))
targets, inputs = [p[1] for p in pairs], [p[0] for p in pairs]
print("targets vs inputs %.4f" % fid_score(inputs, targets))
print("targets vs targets %.4f" % fid_score(targets[:20], targets[20:]))
