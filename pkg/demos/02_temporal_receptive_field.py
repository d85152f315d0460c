# %% [markdown]
# # How far back does the temporal block look?
#
# The temporal block stacks dilated inception layers (kernel sizes 2, 3, 6, 7
# in parallel) with a tanh/sigmoid gate.  Here we probe it directly: nudge one
# input step and see whether the newest output moves.

# %%
import numpy as np

from stgcn_hyper.tcn import TcnConfig, init_tcn, receptive_field, required_length, tcn_forward

# %% [markdown]
# A single kernel [1, -1] applied to a ramp is a first difference.  Tap j of a
# kernel multiplies the input j steps back, so the result is +1 everywhere.

# %%
from stgcn_hyper.numerics import Tensor
from stgcn_hyper.tcn import dilated_inception

ramp = Tensor(np.arange(8.0).reshape(1, 1, 1, 8))
print(dilated_inception(ramp, [Tensor(np.array([[[1.0, -1.0]]]))]).data.ravel())

# %% [markdown]
# ## Empirical receptive field


# %%
def influential_lags(cfg, T, seed=0):
    params = init_tcn(cfg, np.random.default_rng(seed))
    x = np.random.default_rng(seed + 1).normal(size=(1, 1, 1, T))
    base = tcn_forward(x, cfg, params)[1].data[..., -1]
    lags = []
    for lag in range(T):
        y = x.copy()
        y[..., T - 1 - lag] += 1.0
        if np.any(tcn_forward(y, cfg, params)[1].data[..., -1] != base):
            lags.append(lag)
    return lags


for k in (2, 3, 6, 7):
    for layers in (1, 2, 3):
        cfg = TcnConfig(layers=layers, kernel_sizes=(k,), conv_channels=2, residual_channels=2, skip_channels=2)
        rf = int(receptive_field(k, layers, 1.0))
        print(f"k={k} layers={layers}: formula {rf}, furthest lag seen {max(influential_lags(cfg, rf + 4))}")

# %% [markdown]
# With a dilation exponent above 1 the closed-form value and the true span of
# the stacked convolutions differ.  Window validation uses the true span.

# %%
cfg = TcnConfig(layers=3, kernel_sizes=(7,), conv_channels=2, dilation_exponential=2.0)
print("formula", receptive_field(7, 3, 2.0), "true span", required_length(cfg))
