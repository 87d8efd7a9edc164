# # GRPO fine-tuning
#
# Imitation never sees a negative example, so some anchors drive into traffic.
# Group-relative policy optimization samples G chains per anchor, standardizes
# rewards inside each anchor's group and gives every colliding chain a fixed
# penalty. A short run on dense traffic already moves the collision rate.

import copy

from anchorgrpo.config import ILConfig, ModelConfig, RLConfig
from anchorgrpo.evaluation import evaluate
from anchorgrpo.grpo import train_rl
from anchorgrpo.imitation import build_generator, train_il
from anchorgrpo.scene import generate_dataset

train = generate_dataset(150, 1) + generate_dataset(150, 2, traffic="dense")
test = generate_dataset(40, 99, traffic="dense")

il = build_generator(train, ModelConfig(hidden=(96, 96)), seed=0)
train_il(il, train, ILConfig(steps=1500), seed=0)

rl = copy.deepcopy(il)
log = train_rl(rl, train, RLConfig(epochs=3), seed=0, log_every=10)
for row in log[::10]:
    print(f"iter {row['iteration']:3d} reward={row['mean_reward']:.3f} collisions={row['collision_rate']:.3f} "
          f"anchor spread={row['anchor_reward_spread']:.3f}")

# %%
for name, gen in (("imitation", il), ("grpo", rl)):
    rep = evaluate(gen, test, model=name)[0]
    print(f"{name:9s} collision rate={rep.collision_rate:.3f} PDMS@10={rep.pdms_at[10]:.3f} "
          f"selected PDMS={rep.pdms_selected:.3f}")
