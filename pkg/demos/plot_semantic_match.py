"""
Building an auxiliary image from a reference
============================================

A black outline drawing and a colored reference are matched patch by patch
in feature space, and the reference blocks are tiled into a mosaic that is
aligned with the outline.
"""
# %%
# Draw a synthetic pair
# ---------------------
# ``render_pair`` returns an outline input and its colored target on white.
import os
import tempfile

import numpy as np

from segin.data import render_pair, save_image
from segin.features import FeatureExtractorConfig
from segin.matching import PatchSpec, match_images

rng = np.random.default_rng(0)
x, _ = render_pair(64, rng)
_, r = render_pair(64, rng)

# %%
# Match and tile
# --------------
# Every input patch picks its most cosine-similar reference patch. Background
# blocks stay white and are marked invalid in the mask.
aux, corr = match_images(x, r, FeatureExtractorConfig(), PatchSpec(k=3))
print("feature grid", corr.input_grid, "reference patches", corr.n_r)
print("valid pixel fraction %.3f" % aux.valid_mask.mean())
print("mean match score %.3f" % corr.score[corr.score > -1].mean())

# %%
# Save the input, reference and mosaic side by side
out = os.environ.get("SEGIN_DEMO_OUT", tempfile.mkdtemp())
save_image(os.path.join(out, "match_grid.png"), np.concatenate([x, r, aux.aux], axis=1))
print("wrote", os.path.join(out, "match_grid.png"))
