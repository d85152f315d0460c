# %% [markdown]
# # Two-stage input masking
#
# Early epochs hide random node-time cells.  Later epochs hide nodes in
# proportion to a softmax of the Laplacian diagonal, and older steps more
# often than recent ones.

# %%
import numpy as np

from stgcn_hyper.masking import (
    MaskConfig,
    mask_probabilities,
    masking_intensity,
    sample_mask,
    stage_for_epoch,
    temporal_weights,
)

np.set_printoptions(precision=3, suppress=True)

# %% [markdown]
# ## Schedule
#
# With nine epochs and no explicit boundaries, the first third is random.

# %%
cfg = MaskConfig()
print([stage_for_epoch(e, cfg, 9) for e in range(9)])
print("evaluation:", stage_for_epoch(0, cfg, 9, training=False))

# %% [markdown]
# ## Per-position masking probability in the Laplacian stage

# %%
probs = mask_probabilities(np.array([0.05, 0.40, 0.20, 0.10]), tau=0.5)
weights = temporal_weights(0.8, 8)
intensity = masking_intensity(probs, weights, ratio=0.1)
print("node probabilities", probs)
print("rows = nodes, columns = oldest ... newest\n", intensity)
print("mean", intensity.mean())

# %% [markdown]
# ## Sampling hits the target ratio

# %%
for stage in ("random", "laplacian"):
    m = sample_mask(probs, weights, 0.1, stage, 0, (500, 1, 4, 8))
    print(stage, "masked fraction", round(float((m == 0).mean()), 4))
