"""
Sewing two backbones together
=============================

Early fusion combines the top dense layers of two backbones elementwise
(sum or product) and writes the result back into both models.  Everything
else in each model is left exactly as it was; the heads are then retrained.
"""

import numpy as np

from posefuse.fusion import early_fuse_weights, sew_into_models
from posefuse.nn import build_model

a, b = build_model("A", seed=0), build_model("B", seed=0)
print("top dense shapes:", a.backbone.top_dense.shape, b.backbone.top_dense.shape)

for op in ("add", "multiply"):
    fused = early_fuse_weights(a.backbone.top_dense, b.backbone.top_dense, op)
    sewn_a, sewn_b = sew_into_models(a, b, fused, op)
    w = fused.params["weight"]
    print(f"{op:8s} -> {sewn_a.name}, {sewn_b.name}; weight std {w.std():.2e}")

    # only the top dense layer differs from the source model
    changed = [k for k, v in sewn_a.parameters().items()
               if not np.array_equal(v, a.parameters()[k])]
    print("   changed in", sewn_a.name + ":", changed)
    print("   lineage:", sewn_a.lineage)

# The product of two small weight matrices is much smaller than either,
# which is why the stand-in backbones scale their top layers at init.
print("A weight std", a.backbone.top_dense.params["weight"].std())
