"""
Training a pose regressor
=========================

A stand-in backbone turns each image into a feature vector; only the
dropout / pooling / dense head and the two loss weights ``s_x`` and ``s_q``
are trained.  The loss balances translation and rotation residuals through
those learnable log-variances.
"""

import numpy as np

from posefuse import data as D
from posefuse.nn import TrainConfig, TrainingData, build_model, combine_homoscedastic, combine_stable, train

# The two loss forms are the same function once s = log(sigma^2).
lx, lq, sx, sq = 2.0, 0.3, 1.5, 0.2
print(combine_homoscedastic(lx, lq, sx, sq), combine_stable(lx, lq, np.log(sx ** 2), np.log(sq ** 2)))

# A small synthetic walk: 120 views along a figure-eight.
ds = D.synthetic_dataset(seed=0, n=120)
split = D.split_dataset(ds.records, seed=0)
stats = D.compute_normalization(split.train)
image_stats = D.compute_image_stats(ds.images(r.image_ref) for r in split.train)
targets = D.pose_targets(split.train, stats)

# Backbone features are computed once; the backbone is frozen.
model = build_model("A", seed=0)
train_refs = [r.image_ref for r in split.train]
feats = np.concatenate([model.backbone.trunk_forward(b) for b in ds.images.batches(train_refs, image_stats)])
model.backbone.calibrate(feats)

trained, history = train(model, TrainingData(targets, trunk_features=feats), TrainConfig(epochs=60))
print(f"loss {history[0]:.3f} -> {history[-1]:.3f}; s_x {trained.s_x:.2f}, s_q {trained.s_q:.2f}")

# Median translation error on the held-out views, before and after.
test_refs = [r.image_ref for r in split.test]
test_feats = np.concatenate([model.backbone.trunk_forward(b) for b in ds.images.batches(test_refs, image_stats)])
gt = D.raw_poses(split.test)[:, :3]
for label, m in (("untrained", model), ("trained", trained)):
    t = D.denormalize_translation(m.predict_from_trunk(test_feats)[:, :3], stats)
    print(f"{label:9s} median e_t {np.median(np.linalg.norm(t - gt, axis=1)):.2f} m")
