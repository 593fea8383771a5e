"""
Attention inside the non-local block
====================================

Each spatial position aggregates all others, weighted by a softmax over
embedded dot products. The rows of the attention matrix are distributions.
"""
# %%
import torch

from segin.networks import NonLocalBlock, attention_weights, non_local_forward

torch.manual_seed(0)
block = NonLocalBlock(channels=4).double()
feats = torch.randn(6, 4, dtype=torch.float64)

# %%
# Attention rows sum to one
a = attention_weights(feats, block)
print("row sums", a.sum(dim=1).detach().numpy().round(12))

# %%
# The block output is the input plus a projected aggregate, so a zero
# projection leaves the features untouched.
with torch.no_grad():
    block.out_proj.weight.zero_()
print("unchanged:", torch.equal(non_local_forward(feats, block), feats))
