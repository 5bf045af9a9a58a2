"""
Comparing representations with CKA
==================================

Linear CKA scores how similar two activation matrices are, row for row.
It ignores rotations and isotropic scaling of either side, which is what
makes it usable across layers of different width.
"""

import numpy as np

from cilab import RngStream
from cilab.repsim import CkaAccumulator, cka_full, cka_unbiased, layerwise_cka, LayerTapSet

rng = RngStream(0)
x = rng.normal(size=(500, 20))

# a random rotation and a rescale leave CKA at exactly one
q, _ = np.linalg.qr(rng.normal(size=(20, 20)))
print("CKA(x, 7 x Q)      =", cka_full(x, 7.0 * x @ q))

# a noisy linear readout is similar, an unrelated matrix is not
y = x[:, :5] @ rng.normal(size=(5, 10)) + 0.5 * rng.normal(size=(500, 10))
z = rng.normal(size=(500, 10))
print("CKA(x, readout)    =", round(cka_full(x, y), 4))
print("CKA(x, noise)      =", round(cka_full(x, z), 4))

# the unbiased estimator removes the small-sample floor seen above
print("unbiased (x, noise) =", round(cka_unbiased(x, z), 4))

# streaming over mini-batches: sum the per-batch HSIC terms, normalise once
acc = CkaAccumulator()
for start in range(0, 500, 50):
    acc.update(x[start:start + 50], y[start:start + 50])
print("mini-batch (n=50)  =", round(acc.finalize(), 4), "vs whole set", round(cka_unbiased(x, y), 4))

# layerwise use: one value per named tap
taps_a = LayerTapSet(["low", "high"], [x, y])
taps_b = LayerTapSet(["low", "high"], [x @ q, z])
for tap, value in layerwise_cka(taps_a, taps_b, batch_size=100, passes=5, rng=rng.derive("cka")):
    print(f"  {tap:5s} {value:.4f}")
