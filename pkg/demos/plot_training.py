"""
Training a small translator on synthetic shapes
===============================================

A short run on outline/color pairs. The reconstruction loss falls within a
few dozen steps; the trained model then recolors an outline with the style
of a chosen reference.
"""
# %%
import os
import tempfile

import numpy as np

from segin.data import load_dataset, save_image, synth_shapes_dataset
from segin.trainer import TrainConfig, read_loss_csv, train

out = os.environ.get("SEGIN_DEMO_OUT", tempfile.mkdtemp())
manifest = synth_shapes_dataset(24, 32, seed=0, root=os.path.join(out, "shapes"))
test = load_dataset(synth_shapes_dataset(4, 32, seed=9, root=os.path.join(out, "shapes"), split="test"))

# %%
# Train
# -----
# Default loss weights, a reduced image size and step count.
steps = int(os.environ.get("SEGIN_DEMO_STEPS", 40))
cfg = TrainConfig(steps=steps, image_size=32, seed=0)
trainer = train(cfg, manifest, os.path.join(out, "run"))
rows = read_loss_csv(os.path.join(out, "run", "losses.csv"))
print("recon first %.4f last %.4f" % (rows[0]["recon"], rows[-1]["recon"]))

# %%
# Translate with two different references
# ---------------------------------------
x = test[0][0]
outs, segs, auxes = trainer.model.translate_batch([x, x], [test[1][1], test[2][1]])
save_image(os.path.join(out, "translations.png"), np.concatenate([x, *outs], axis=1))
print("wrote", os.path.join(out, "translations.png"))
