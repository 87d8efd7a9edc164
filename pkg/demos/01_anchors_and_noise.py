# # Anchors and exploration noise
#
# Expert trajectories from the synthetic scenes cluster into a handful of
# driving intentions. K-means over the flattened waypoints gives the anchor
# vocabulary the generator denoises from.

import numpy as np

from anchorgrpo.scene import generate_dataset
from anchorgrpo.trajectory import (Trajectory, apply_additive_noise, apply_multiplicative_noise, diversity,
                                   kmeans_anchors, matched_additive_std, second_difference_max)

scenes = generate_dataset(300, 0)
experts = [s.expert for s in scenes]
anchors = kmeans_anchors(experts, 8, seed=0)

print("anchor endpoints (m) and cluster sizes")
for a, n in zip(anchors.anchors, anchors.counts):
    print(f"  ({a[-1, 0]:6.1f}, {a[-1, 1]:6.1f})  n={n}")

# %%
# Multiplicative noise scales a whole trajectory along each axis, so a smooth
# path stays smooth. Independent per-waypoint noise of the same energy makes it
# jagged, which the comfort check notices.

rng = np.random.default_rng(1)
traj = Trajectory(anchors.anchors[0])
mul = apply_multiplicative_noise(traj, *np.maximum(rng.normal(size=2) * 0.1, -0.99))
add = apply_additive_noise(traj, rng.normal(size=traj.wp.size) * matched_additive_std(traj, 0.1))
print(f"\nmax second difference: clean {second_difference_max(traj):.2f}, "
      f"multiplicative {second_difference_max(mul):.2f}, additive {second_difference_max(add):.2f}")

# %%
# Diversity is one minus mean pairwise overlap, normalized per waypoint by the
# spread around the origin.

print(f"\ndiversity of the 8 anchors: {diversity(anchors.anchors):.3f}")
print(f"diversity of 8 copies of one anchor: {diversity(np.repeat(anchors.anchors[:1], 8, axis=0)):.3f}")
