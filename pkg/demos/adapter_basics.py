"""
One adapted linear site
=======================

Build a single adapter, check that it starts out transparent, then nudge the
scaling vectors and watch the dense update appear.
"""

import numpy as np

from aflora import AdapterMode, SeededRng, Tensor, adapter_forward, adapter_init, effective_delta
from aflora.adapters import trainable_param_count

# A 12 -> 8 site with rank 3. The backbone weight w0 is drawn and frozen.
layer = adapter_init(12, 8, 3, AdapterMode.AFLORA, SeededRng(0))
x = Tensor(np.random.default_rng(1).normal(size=(12, 5)))

# vec_b starts at zero, so the adapter path contributes nothing yet.
print("transparent at init:", np.array_equal(adapter_forward(layer, x).data, layer.w0.data @ x.data))
print("trainable entries:", trainable_param_count(layer), "(A 36, B 24, vec_d 3, vec_b 8)")

# Give the up-scaling vector some mass and the update becomes visible.
layer.vec_b.data[...] = 0.5
delta = effective_delta(layer).data
print("update rank:", np.linalg.matrix_rank(delta), " norm:", round(float(np.linalg.norm(delta)), 4))

# Freezing the projections leaves only the two vectors trainable.
layer.freeze("A", step=0)
layer.freeze("B", step=0)
print("after freezing A and B:", trainable_param_count(layer), "trainable entries")

# LoRA mode keeps the vectors pinned at one and starts B at zero instead.
lora = adapter_init(12, 8, 3, "lora", SeededRng(0))
print("lora trainable entries:", trainable_param_count(lora))
