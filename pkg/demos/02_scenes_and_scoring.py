# # Scenes, rewards and pictures
#
# Each scene holds a drivable polygon, a centerline, constant-velocity agents
# and a rejection-sampled expert. The scorer returns the PDMS submetrics.

import os

import numpy as np

from anchorgrpo.evaluation import render_scene_svg
from anchorgrpo.scene import TAGS, generate_scene, score_batch

out = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out, exist_ok=True)

for i, tag in enumerate(TAGS):
    sc = generate_scene(tag, 10 + i, traffic="dense")
    r = score_batch(sc, sc.expert.wp[None])
    print(f"{tag:12s} agents={len(sc.agents)} expert PDMS={r['pdms'][0]:.3f} alternatives={len(sc.alternatives)}")

# %%
# Stretching the expert forward or pushing it sideways shows which submetric reacts.

sc = generate_scene("straight", 3, traffic="dense")
wp = sc.expert.wp
drift = np.stack([np.zeros(len(wp)), np.linspace(1.0, 8.0, len(wp))], axis=1)
variants = np.stack([wp, wp * [1.4, 1.0], wp + drift, wp * [0.5, 1.0]])
r = score_batch(sc, variants)
for name, p, c in zip(("expert", "faster", "drift", "slower"), r["pdms"], r["collided"]):
    print(f"  {name:7s} PDMS={p:.3f} collided={bool(c)}")

with open(os.path.join(out, "scene_variants.svg"), "w") as f:
    f.write(render_scene_svg(sc, variants, highlights=[0]))
print(f"\nwrote {out}/scene_variants.svg")
