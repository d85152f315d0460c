# %% [markdown]
# # Learning a hypergraph over sensors
#
# Each sensor is a node.  Two embedding tables feed a small generator that
# proposes weighted hyperedges, and a sigmoid attention decides how strongly
# each node joins each hyperedge.  A self-loop hyperedge per node keeps every
# node connected, and the normalized Laplacian summarizes the structure.

# %%
import numpy as np

from stgcn_hyper.hypergraph import (
    augment_self_loops,
    build_structure,
    degrees,
    init_mtcl,
    laplacian,
)

np.set_printoptions(precision=4, suppress=True)

# %% [markdown]
# ## A two-node example by hand
#
# One learned hyperedge joins both nodes with weight 1.  After appending the
# self-loops, H has three columns.

# %%
H = augment_self_loops(np.array([[1.0], [1.0]])).data
dv, de = degrees(H)
print("H =\n", H)
print("node degrees", dv.data, "edge degrees", de.data)
print("L =\n", laplacian(H, dv, de).data)  # [[0.25, -0.25], [-0.25, 0.25]]

# %% [markdown]
# ## A random learned structure
#
# With eight sensors and four learned hyperedges, the Laplacian is symmetric,
# its spectrum lies in [0, 1], and D_v^{1/2} 1 lies in its null space.

# %%
rng = np.random.default_rng(0)
s = build_structure(init_mtcl(8, rng, embed_dim=6, hyperedges=4))
L = s.L.data
print("incidence (learned part):\n", s.H.data[:, :4])
print("eigenvalues", np.linalg.eigvalsh(L))
print("|L Dv^1/2 1| =", np.abs(L @ np.sqrt(s.dv.data)).max())

# %% [markdown]
# The diagonal of L reads as an importance score per sensor: a node that
# shares strong hyperedges with others has a larger diagonal entry.  The
# masking stage uses exactly this diagonal.

# %%
print("importance", np.diag(L))
